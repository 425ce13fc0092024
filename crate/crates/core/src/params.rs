//! Market inputs and the payoff-derived initial condition ψ(η, 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Asian contract family; selects the initial condition and the price map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    AvgRateCall,
    AvgRatePut,
    AvgStrikeCall,
    AvgStrikePut,
}

impl OptionKind {
    pub fn is_average_rate(self) -> bool {
        matches!(self, OptionKind::AvgRateCall | OptionKind::AvgRatePut)
    }
}

/// Financial inputs of the reduced Asian PDE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Volatility, 1/√time.
    pub sigma: f64,
    /// Risk-free rate.
    pub r: f64,
    /// Dividend yield.
    pub q: f64,
    /// Expiry.
    pub t: f64,
    /// Strike, used only by the price maps.
    pub k: f64,
    /// Half-width of the truncated η domain.
    pub eta_max: f64,
    pub kind: OptionKind,
    /// Apex of the average-rate-call triangle; `None` means η_max/2. Other
    /// positions in (0, η_max) move the middle kink, e.g. onto a grid node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apex: Option<f64>,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self { sigma: 1.0, r: 0.05, q: 0.0, t: 1.0, k: 1.0, eta_max: 2.0, kind: OptionKind::AvgRateCall, apex: None }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma, self.r, self.q, self.t, self.k, self.eta_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("market parameters must be finite".into()));
        }
        if self.sigma <= 0.0 || self.t <= 0.0 || self.eta_max <= 0.0 {
            return Err(Error::Invalid("require sigma > 0, T > 0, eta_max > 0".into()));
        }
        if let Some(a) = self.apex {
            if !(a > 0.0 && a < self.eta_max) {
                return Err(Error::Invalid(format!("triangle apex {a} outside (0, eta_max)")));
            }
        }
        Ok(())
    }

    /// Initial condition ψ(η, 0). The average-rate call uses the continuous
    /// triangular continuation with apex η_max/2, so the periodic extension has
    /// no jump.
    pub fn psi0(&self, eta: f64) -> f64 {
        match self.kind {
            OptionKind::AvgRateCall => match self.apex {
                None => 0.5 * self.eta_max * triangle(2.0 * eta / self.eta_max - 1.0),
                Some(a) if eta <= a => eta.max(0.0),
                Some(a) => (a * (self.eta_max - eta) / (self.eta_max - a)).max(0.0),
            },
            OptionKind::AvgRatePut => (-eta).max(0.0),
            OptionKind::AvgStrikeCall => (1.0 - eta).max(0.0),
            OptionKind::AvgStrikePut => (eta - 1.0).max(0.0),
        }
    }

    /// Locations where ψ₀ has a derivative discontinuity.
    pub fn kinks(&self) -> Vec<f64> {
        match self.kind {
            OptionKind::AvgRateCall => vec![0.0, self.apex.unwrap_or(0.5 * self.eta_max), self.eta_max],
            OptionKind::AvgRatePut => vec![0.0],
            OptionKind::AvgStrikeCall | OptionKind::AvgStrikePut => vec![1.0],
        }
    }
}

/// Unit triangle Λ(x) = max(1 − |x|, 0).
pub fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_apex_and_support() {
        assert_eq!(triangle(0.0), 1.0);
        assert_eq!(triangle(1.0), 0.0);
        assert_eq!(triangle(-1.5), 0.0);
        assert_eq!(triangle(0.25), 0.75);
    }

    #[test]
    fn avg_rate_call_is_truncated_ramp() {
        let p = MarketParams::default();
        assert_eq!(p.psi0(0.5 * p.eta_max), 0.5 * p.eta_max);
        assert_eq!(p.psi0(-0.3), 0.0);
        // matches max(η, 0) below the apex, mirrored above
        assert!((p.psi0(0.4) - 0.4).abs() < 1e-15);
        assert!((p.psi0(1.6) - 0.4).abs() < 1e-15);
        assert_eq!(p.psi0(p.eta_max), 0.0);
    }

    #[test]
    fn moved_apex_keeps_triangle_continuous() {
        let p = MarketParams { apex: Some(1.25), ..Default::default() };
        assert_eq!(p.psi0(1.25), 1.25);
        assert_eq!(p.psi0(0.7), 0.7);
        assert!((p.psi0(1.625) - 0.625).abs() < 1e-15);
        assert_eq!(p.psi0(2.0), 0.0);
        assert_eq!(p.kinks()[1], 1.25);
        assert!(MarketParams { apex: Some(2.5), ..Default::default() }.validate().is_err());
        assert_eq!(MarketParams { apex: Some(1.0), ..Default::default() }.psi0(1.5), MarketParams::default().psi0(1.5));
    }

    #[test]
    fn other_kinds_follow_payoffs() {
        let mut p = MarketParams::default();
        p.kind = OptionKind::AvgRatePut;
        assert_eq!(p.psi0(-0.7), 0.7);
        p.kind = OptionKind::AvgStrikeCall;
        assert_eq!(p.psi0(0.25), 0.75);
        p.kind = OptionKind::AvgStrikePut;
        assert_eq!(p.psi0(1.5), 0.5);
    }

    #[test]
    fn validation_rejects_nonpositive_sigma() {
        let p = MarketParams { sigma: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
        assert!(MarketParams::default().validate().is_ok());
    }

    #[test]
    fn kind_serializes_snake_case() {
        let s = serde_json::to_string(&OptionKind::AvgStrikePut).unwrap();
        assert_eq!(s, "\"avg_strike_put\"");
    }
}
