//! Independent references: a Crank-Nicolson solver for the reduced PDE, Monte
//! Carlo pricing under geometric Brownian motion, the ψ → price map and a
//! brute-force prefix sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::StateVector;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::params::{MarketParams, OptionKind};

/// A price with its statistical error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceQuote {
    pub value: f64,
    /// Standard error; 0 for deterministic methods.
    pub stderr: f64,
    pub method: String,
}

/// Treatment of the truncated η edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClosure {
    /// ψ(η + 2η_max) = −ψ(η): the extension implied by half-integer Fourier modes.
    Antiperiodic,
    /// Edge values frozen at the initial condition.
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnConfig {
    pub closure: EdgeClosure,
    /// Replace the first two steps by four half-size implicit Euler steps.
    pub rannacher: bool,
    /// Keep every `stride`-th time level (level 0 and the last are always kept).
    pub stride: usize,
}

impl Default for CnConfig {
    fn default() -> Self {
        Self { closure: EdgeClosure::Antiperiodic, rannacher: true, stride: 1 }
    }
}

/// ψ on a cell-centred η lattice at stored time levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiLattice {
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
    /// values[level][cell]
    pub values: Vec<Vec<f64>>,
}

impl PsiLattice {
    /// Bilinear interpolation; η is clamped to the outermost cell centres.
    pub fn at(&self, eta: f64, tau: f64) -> Result<f64> {
        let (t0, t1) = (self.tau[0], *self.tau.last().unwrap());
        if tau < t0 - 1e-12 || tau > t1 + 1e-12 {
            return Err(Error::OutOfDomain(format!("τ₁ = {tau} outside [{t0}, {t1}]")));
        }
        let locate = |xs: &[f64], x: f64| -> (usize, f64) {
            if xs.len() == 1 {
                return (0, 0.0);
            }
            let x = x.clamp(xs[0], xs[xs.len() - 1]);
            let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1;
            (i, (x - xs[i]) / (xs[i + 1] - xs[i]))
        };
        let (it, ft) = locate(&self.tau, tau);
        let (ix, fx) = locate(&self.eta, eta);
        let row = |t: usize| {
            let r = &self.values[t];
            if ix + 1 < r.len() {
                r[ix] * (1.0 - fx) + r[ix + 1] * fx
            } else {
                r[ix]
            }
        };
        Ok(if it + 1 < self.tau.len() { row(it) * (1.0 - ft) + row(it + 1) * ft } else { row(it) })
    }
}

/// Tridiagonal operator with optional corner entries, plus a constant forcing.
struct Operator {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    /// (row 0, col n−1)
    top_right: f64,
    /// (row n−1, col 0)
    bottom_left: f64,
    forcing: Vec<f64>,
}

impl Operator {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i] + self.forcing[i];
                if i > 0 {
                    v += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                if i == 0 {
                    v += self.top_right * x[n - 1];
                }
                if i == n - 1 {
                    v += self.bottom_left * x[0];
                }
                v
            })
            .collect()
    }
}

/// Thomas algorithm for a (non-cyclic) tridiagonal system.
fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = r[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (r[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Cyclic tridiagonal solve via Sherman-Morrison.
fn cyclic_thomas(a: &[f64], b: &[f64], c: &[f64], top_right: f64, bottom_left: f64, r: &[f64]) -> Vec<f64> {
    let n = b.len();
    if top_right == 0.0 && bottom_left == 0.0 {
        return thomas(a, b, c, r);
    }
    let gamma = -b[0];
    let mut bb = b.to_vec();
    bb[0] -= gamma;
    bb[n - 1] -= bottom_left * top_right / gamma;
    let x = thomas(a, &bb, c, r);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = bottom_left;
    let z = thomas(a, &bb, c, &u);
    let fact = (x[0] + top_right * x[n - 1] / gamma) / (1.0 + z[0] + top_right * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

/// Spatial operator of ψ_τ = ½σ²η²ψ_ηη + (1/T − (r−q)η)ψ_η on cell centres.
fn spatial_operator(
    params: &MarketParams,
    eta: &[f64],
    h: f64,
    closure: EdgeClosure,
    psi0: &dyn Fn(f64) -> f64,
) -> Operator {
    let n = eta.len();
    let mut op = Operator {
        sub: vec![0.0; n],
        diag: vec![0.0; n],
        sup: vec![0.0; n],
        top_right: 0.0,
        bottom_left: 0.0,
        forcing: vec![0.0; n],
    };
    for (j, &e) in eta.iter().enumerate() {
        let a = 0.5 * params.sigma * params.sigma * e * e / (h * h);
        let b = (1.0 / params.t - (params.r - params.q) * e) / (2.0 * h);
        op.sub[j] = a - b;
        op.diag[j] = -2.0 * a;
        op.sup[j] = a + b;
    }
    match closure {
        EdgeClosure::Antiperiodic => {
            op.top_right = -op.sub[0];
            op.bottom_left = -op.sup[n - 1];
        }
        EdgeClosure::Dirichlet => {
            // ghost = 2g − ψ_edge so the face value equals g
            let gl = psi0(eta[0] - 0.5 * h);
            let gr = psi0(eta[n - 1] + 0.5 * h);
            op.diag[0] -= op.sub[0];
            op.forcing[0] += 2.0 * op.sub[0] * gl;
            op.diag[n - 1] -= op.sup[n - 1];
            op.forcing[n - 1] += 2.0 * op.sup[n - 1] * gr;
        }
    }
    op
}

/// θ-scheme step: (I − θ dt L) ψ⁺ = (I + (1−θ) dt L) ψ + dt·f.
fn theta_step(op: &Operator, psi: &[f64], dt: f64, theta: f64) -> Vec<f64> {
    let lx = op.apply(psi);
    // op.apply adds the forcing once; the implicit side must not see it
    let rhs: Vec<f64> =
        psi.iter().zip(&lx).zip(&op.forcing).map(|((p, l), f)| p + (1.0 - theta) * dt * (l - f) + dt * f).collect();
    let a: Vec<f64> = op.sub.iter().map(|v| -theta * dt * v).collect();
    let b: Vec<f64> = op.diag.iter().map(|v| 1.0 - theta * dt * v).collect();
    let c: Vec<f64> = op.sup.iter().map(|v| -theta * dt * v).collect();
    cyclic_thomas(&a, &b, &c, -theta * dt * op.top_right, -theta * dt * op.bottom_left, &rhs)
}

/// Crank-Nicolson solution of the reduced PDE from an arbitrary initial condition
/// on `n_x` cells over [−η_max, η_max] and `n_t` steps up to τ₁ = T.
pub fn crank_nicolson_with(
    params: &MarketParams,
    psi0: &dyn Fn(f64) -> f64,
    n_x: usize,
    n_t: usize,
    cfg: &CnConfig,
) -> Result<PsiLattice> {
    params.validate()?;
    if n_x < 4 || n_t < 1 || cfg.stride == 0 {
        return Err(Error::Invalid(format!("n_x = {n_x} (≥ 4), n_t = {n_t} (≥ 1), stride ≥ 1")));
    }
    let h = 2.0 * params.eta_max / n_x as f64;
    let eta: Vec<f64> = (0..n_x).map(|j| -params.eta_max + (j as f64 + 0.5) * h).collect();
    let op = spatial_operator(params, &eta, h, cfg.closure, psi0);
    let dt = params.t / n_t as f64;
    let mut psi: Vec<f64> = eta.iter().map(|&e| psi0(e)).collect();
    let scale = psi.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut tau = vec![0.0];
    let mut values = vec![psi.clone()];
    for step in 0..n_t {
        psi = if cfg.rannacher && step < 2 {
            let half = theta_step(&op, &psi, 0.5 * dt, 1.0);
            theta_step(&op, &half, 0.5 * dt, 1.0)
        } else {
            theta_step(&op, &psi, dt, 0.5)
        };
        let peak = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !peak.is_finite() || peak > 1e6 * scale {
            return Err(Error::Unstable(format!("Crank-Nicolson blow-up at step {step} (max |ψ| = {peak:e})")));
        }
        if (step + 1) % cfg.stride == 0 || step + 1 == n_t {
            tau.push((step + 1) as f64 * dt);
            values.push(psi.clone());
        }
    }
    Ok(PsiLattice { eta, tau, values })
}

/// Crank-Nicolson solution from the contract's initial condition.
pub fn crank_nicolson_solve(params: &MarketParams, n_x: usize, n_t: usize) -> Result<PsiLattice> {
    crank_nicolson_with(params, &|e| params.psi0(e), n_x, n_t, &CnConfig::default())
}

/// Reference ψ at the quantum lattice nodes, values[t][x] at (τ_t, η_x), from a
/// Crank-Nicolson run refined by the odd factor `refine` in both directions so
/// every coarse node is a fine node.
pub fn reference_on_grid(
    spec: &GridSpec,
    params: &MarketParams,
    refine: usize,
    cfg: &CnConfig,
) -> Result<Vec<Vec<f64>>> {
    if refine % 2 == 0 {
        return Err(Error::Invalid(format!("refinement factor {refine} must be odd so nodes coincide")));
    }
    let n_x = spec.n_eta_pts() * refine;
    let n_t = (spec.n_tau_pts() + 1) * refine;
    let fine = crank_nicolson_with(params, &|e| params.psi0(e), n_x, n_t, &CnConfig { stride: refine, ..cfg.clone() })?;
    let mid = (refine - 1) / 2;
    Ok((0..spec.n_tau_pts())
        .map(|t| (0..spec.n_eta_pts()).map(|x| fine.values[t + 1][x * refine + mid]).collect())
        .collect())
}

/// Payoff applied at expiry by the Monte Carlo pricer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payoff {
    /// The contract payoff of the option kind.
    Contract,
    /// S_T · ψ₀(η_T): the terminal condition the PDE is actually solved with.
    InitialCondition,
}

/// Monte Carlo inputs. Pricing happens at time `t0` with running integral `i0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub s0: f64,
    pub i0: f64,
    pub t0: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub payoff: Payoff,
}

impl McSpec {
    pub fn fresh(s0: f64, n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self { s0, i0: 0.0, t0: 0.0, n_paths, n_steps, seed, payoff: Payoff::Contract }
    }
}

/// η for the given state: (I − KT)/(ST) for average-rate, I/(ST) for average-strike.
pub fn eta_of(params: &MarketParams, s: f64, i: f64) -> f64 {
    if params.kind.is_average_rate() {
        (i - params.k * params.t) / (s * params.t)
    } else {
        i / (s * params.t)
    }
}

fn contract_payoff(params: &MarketParams, s: f64, i: f64) -> f64 {
    let avg = i / params.t;
    match params.kind {
        OptionKind::AvgRateCall => (avg - params.k).max(0.0),
        OptionKind::AvgRatePut => (params.k - avg).max(0.0),
        OptionKind::AvgStrikeCall => (s - avg).max(0.0),
        OptionKind::AvgStrikePut => (avg - s).max(0.0),
    }
}

const MC_BATCHES: usize = 64;

/// Monte Carlo price under risk-neutral GBM with exact log-normal steps and a
/// trapezoidal running integral.
pub fn monte_carlo_price(params: &MarketParams, mc: &McSpec) -> Result<PriceQuote> {
    params.validate()?;
    if mc.n_paths < 1000 || mc.n_steps == 0 {
        return Err(Error::Invalid(format!("need ≥ 1000 paths and ≥ 1 step (got {}, {})", mc.n_paths, mc.n_steps)));
    }
    if !(mc.t0 >= 0.0 && mc.t0 < params.t) || !(mc.s0 > 0.0) {
        return Err(Error::Invalid("require S0 > 0 and 0 ≤ t0 < T".into()));
    }
    let horizon = params.t - mc.t0;
    let dt = horizon / mc.n_steps as f64;
    let drift = (params.r - params.q - 0.5 * params.sigma * params.sigma) * dt;
    let vol = params.sigma * dt.sqrt();
    let per_batch = mc.n_paths.div_ceil(MC_BATCHES);
    let sums: Vec<(f64, f64, usize)> = (0..MC_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(b as u64);
            let count = per_batch.min(mc.n_paths.saturating_sub(b * per_batch));
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let mut s = mc.s0;
                let mut i = mc.i0;
                for _ in 0..mc.n_steps {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let next = s * (drift + vol * z).exp();
                    i += 0.5 * (s + next) * dt;
                    s = next;
                }
                let pay = match mc.payoff {
                    Payoff::Contract => contract_payoff(params, s, i),
                    Payoff::InitialCondition => s * params.psi0(eta_of(params, s, i)),
                };
                s1 += pay;
                s2 += pay * pay;
            }
            (s1, s2, count)
        })
        .collect();
    let (s1, s2, n) = sums.iter().fold((0.0, 0.0, 0usize), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    let nf = n as f64;
    let mean = s1 / nf;
    let var = ((s2 / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    let disc = (-params.r * horizon).exp();
    Ok(PriceQuote { value: disc * mean, stderr: disc * (var / nf).sqrt(), method: "monte_carlo".into() })
}

/// V = S e^{−q(T−t)} ψ(η, T − t) for a ψ value already evaluated at the mapped point.
pub fn price_from_psi(psi_val: f64, s: f64, i: f64, t: f64, params: &MarketParams) -> Result<PriceQuote> {
    let eta = eta_of(params, s, i);
    if !(eta.abs() <= params.eta_max) {
        return Err(Error::OutOfDomain(format!("η = {eta} outside ±η_max = {}", params.eta_max)));
    }
    if !(0.0..=params.t).contains(&t) {
        return Err(Error::OutOfDomain(format!("t = {t} outside [0, T]")));
    }
    Ok(PriceQuote { value: s * (-params.q * (params.t - t)).exp() * psi_val, stderr: 0.0, method: "psi_map".into() })
}

/// Σ |amp_x|² over x_i..=x_f.
pub fn brute_prefix_sum(state: &StateVector, x_i: usize, x_f: usize) -> Result<f64> {
    if x_i > x_f || x_f >= state.amplitudes.len() {
        return Err(Error::Invalid(format!("window [{x_i}, {x_f}] outside {} amplitudes", state.amplitudes.len())));
    }
    Ok(state.amplitudes[x_i..=x_f].iter().map(|a| a.norm_sqr()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{estimate_window_integral, AmplitudeEstimator};
    use crate::linalg::{c, C64};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn bump(e: f64) -> f64 {
        (-4.0 * (e - 0.3).powi(2)).exp()
    }

    #[test]
    fn cyclic_solver_matches_dense() {
        let n = 7;
        let a: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| 3.0 + 0.2 * i as f64).collect();
        let cc: Vec<f64> = (0..n).map(|i| -0.4 + 0.05 * i as f64).collect();
        let (tr, bl) = (0.7, -0.2);
        let r: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = cyclic_thomas(&a, &b, &cc, tr, bl, &r);
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                b[i]
            } else if j + 1 == i {
                a[i]
            } else if i + 1 == j {
                cc[i]
            } else if i == 0 && j == n - 1 {
                tr
            } else if i == n - 1 && j == 0 {
                bl
            } else {
                0.0
            }
        });
        let want = m.lu().solve(&nalgebra::DVector::from_vec(r)).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(x[i], want[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn initial_slice_is_exact() {
        let p = MarketParams::default();
        let sol = crank_nicolson_solve(&p, 64, 40).unwrap();
        for (e, v) in sol.eta.iter().zip(&sol.values[0]) {
            assert_eq!(*v, p.psi0(*e));
        }
        assert_eq!(sol.tau.len(), 41);
    }

    #[test]
    fn transport_limit() {
        // σ → 0, r = q: ψ_τ = ψ_η / T, so ψ(η, τ) = ψ₀(η + τ/T)
        let p = MarketParams { sigma: 1e-6, r: 0.02, q: 0.02, eta_max: 3.0, ..Default::default() };
        let cfg = CnConfig { rannacher: false, ..Default::default() };
        let err = |n: usize| {
            let sol = crank_nicolson_with(&p, &bump, n, n, &cfg).unwrap();
            let last = sol.values.last().unwrap();
            sol.eta.iter().zip(last).map(|(e, v)| (v - bump(e + 1.0)).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(200), err(400));
        assert!(e1 < 5e-3, "{e1}");
        assert!(e1 / e2 > 3.5, "order ratio {}", e1 / e2);
    }

    #[test]
    fn second_order_on_smooth_data() {
        let p = MarketParams { sigma: 0.8, eta_max: 3.0, ..Default::default() };
        let cfg = CnConfig::default();
        // refine by 3; coarse centres coincide with fine centres
        let sample = |n: usize| {
            let sol = crank_nicolson_with(&p, &bump, n, n, &cfg).unwrap();
            let f = n / 40;
            let last = sol.values.last().unwrap().clone();
            (0..40).map(|x| last[x * f + (f - 1) / 2]).collect::<Vec<f64>>()
        };
        let (u1, u2, u3) = (sample(120), sample(360), sample(1080));
        let d12 = u1.iter().zip(&u2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let d23 = u2.iter().zip(&u3).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let order = (d12 / d23).ln() / 3f64.ln();
        assert!((order - 2.0).abs() < 0.3, "order {order}");
    }

    #[test]
    fn dirichlet_edges_hold_initial_values() {
        let p = MarketParams { kind: OptionKind::AvgStrikePut, eta_max: 3.0, ..Default::default() };
        let cfg = CnConfig { closure: EdgeClosure::Dirichlet, ..Default::default() };
        let sol = crank_nicolson_with(&p, &|e| p.psi0(e), 120, 200, &cfg).unwrap();
        let last = sol.values.last().unwrap();
        // right edge face value stays near ψ₀(η_max) = 2
        assert!((last[119] - 2.0).abs() < 0.1);
        assert!(last.iter().all(|v| *v > -1e-6));
    }

    #[test]
    fn blow_up_is_reported() {
        let op_p = MarketParams::default();
        let sol = crank_nicolson_solve(&op_p, 64, 64).unwrap();
        assert!(sol.values.iter().flatten().all(|v| v.is_finite()));
        // explicit Euler at a huge step is unstable; the detector must catch it
        let h = 2.0 * op_p.eta_max / 64.0;
        let eta: Vec<f64> = (0..64).map(|j| -op_p.eta_max + (j as f64 + 0.5) * h).collect();
        let op = spatial_operator(&op_p, &eta, h, EdgeClosure::Antiperiodic, &|e| op_p.psi0(e));
        let mut psi: Vec<f64> = eta.iter().map(|&e| op_p.psi0(e)).collect();
        for _ in 0..50 {
            psi = theta_step(&op, &psi, 0.1, 0.0);
        }
        assert!(psi.iter().fold(0.0f64, |m, v| m.max(v.abs())) > 1e6);
    }

    #[test]
    fn reference_nodes_coincide() {
        let p = MarketParams::default();
        let spec = GridSpec::with_sizes(&p, 3, 3);
        let r = reference_on_grid(&spec, &p, 3, &CnConfig::default()).unwrap();
        let direct =
            crank_nicolson_with(&p, &|e| p.psi0(e), 24, 27, &CnConfig { stride: 3, ..Default::default() }).unwrap();
        for t in 0..8 {
            assert_abs_diff_eq!(direct.tau[t + 1], spec.tau_nodes()[t], epsilon = 1e-12);
            for x in 0..8 {
                assert_abs_diff_eq!(direct.eta[x * 3 + 1], spec.eta_nodes()[x], epsilon = 1e-12);
                assert_eq!(r[t][x], direct.values[t + 1][x * 3 + 1]);
            }
        }
        assert!(reference_on_grid(&spec, &p, 4, &CnConfig::default()).is_err());
    }

    #[test]
    fn lattice_interpolation() {
        let lat = PsiLattice { eta: vec![0.0, 1.0], tau: vec![0.0, 2.0], values: vec![vec![0.0, 1.0], vec![2.0, 3.0]] };
        assert_abs_diff_eq!(lat.at(0.5, 1.0).unwrap(), 1.5, epsilon = 1e-15);
        assert!(lat.at(0.5, 3.0).is_err());
    }

    #[test]
    fn deterministic_without_volatility() {
        let p = MarketParams { sigma: 1e-12, r: 0.03, q: 0.0, k: 0.9, ..Default::default() };
        let q = monte_carlo_price(&p, &McSpec::fresh(1.0, 2000, 200, 1)).unwrap();
        let avg = (0.03f64.exp() - 1.0) / 0.03;
        assert_abs_diff_eq!(q.value, (-0.03f64).exp() * (avg - 0.9), epsilon = 1e-5);
        assert!(q.stderr < 1e-9);
    }

    #[test]
    fn zero_strike_matches_closed_form() {
        let p = MarketParams { sigma: 0.4, r: 0.05, q: 0.01, k: 0.0, ..Default::default() };
        let q = monte_carlo_price(&p, &McSpec::fresh(1.0, 40_000, 100, 9)).unwrap();
        let g = p.r - p.q;
        let want = (-p.r).exp() * (g.exp() - 1.0) / g;
        assert!((q.value - want).abs() < 3.0 * q.stderr, "{} vs {want} ± {}", q.value, q.stderr);
    }

    #[test]
    fn stderr_shrinks_with_paths() {
        let p = MarketParams { sigma: 0.5, ..Default::default() };
        let a = monte_carlo_price(&p, &McSpec::fresh(1.0, 20_000, 20, 3)).unwrap();
        let b = monte_carlo_price(&p, &McSpec::fresh(1.0, 40_000, 20, 3)).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2f64.sqrt()).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn mc_is_reproducible() {
        let p = MarketParams { sigma: 0.5, ..Default::default() };
        let mc = McSpec::fresh(1.0, 5_000, 10, 42);
        assert_eq!(monte_carlo_price(&p, &mc).unwrap(), monte_carlo_price(&p, &mc).unwrap());
    }

    #[test]
    fn price_map_examples() {
        let p = MarketParams::default();
        let v = price_from_psi(0.3, 2.0, 2.5, p.t, &p).unwrap();
        assert_abs_diff_eq!(v.value, 0.6, epsilon = 1e-15);
        assert_eq!(price_from_psi(0.0, 2.0, 2.5, 0.3, &p).unwrap().value, 0.0);
        assert!(matches!(price_from_psi(0.1, 0.1, 0.0, 0.0, &p), Err(Error::OutOfDomain(_))));
        let ps = MarketParams { kind: OptionKind::AvgStrikeCall, ..Default::default() };
        assert_abs_diff_eq!(eta_of(&ps, 2.0, 1.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn brute_sum_examples() {
        let mut amps = vec![c(0.0); 8];
        amps[3] = C64::new(0.6, 0.0);
        amps[5] = C64::new(0.0, 0.8);
        let s = StateVector::single(amps, "x").unwrap();
        assert_abs_diff_eq!(brute_prefix_sum(&s, 0, 7).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(brute_prefix_sum(&s, 3, 3).unwrap(), 0.36, epsilon = 1e-15);
        assert!(brute_prefix_sum(&s, 2, 8).is_err());
    }

    #[test]
    fn brute_sum_matches_exact_estimator() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut amps: Vec<C64> = (0..32).map(|_| C64::new(rng.random::<f64>(), rng.random::<f64>() - 0.5)).collect();
        let n = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|z| *z /= n);
        let s = StateVector::single(amps, "x").unwrap();
        for _ in 0..100 {
            let a = rng.random_range(0..32);
            let b = rng.random_range(a..32);
            let w = estimate_window_integral(&s, a, b, &AmplitudeEstimator::exact(1e-3)).unwrap();
            assert!((w.value * 32.0 - brute_prefix_sum(&s, a, b).unwrap()).abs() < 1e-12);
        }
    }
}
