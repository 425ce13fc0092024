//! Fast inversion of the fast-forwardable factors, the preconditioned system
//! `W = I + A⁻¹B`, conditioning reports and the linear solve.
//!
//! A1 is diagonal in the position basis and A2 is diagonal in the centered
//! Fourier basis, so both inverses are computed eigenvalue by eigenvalue, either
//! exactly or through a simulated windowed phase estimation.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, GridSpec};
use crate::linalg::{
    c, condition_number, gmres, inverse, inverse_norm, kron, norm_estimate, spectral_norm, vec_norm, CMat, CVec,
    KronSum, KronSylvester, C64,
};
use crate::params::MarketParams;

/// Windowed phase-estimation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpeConfig {
    /// Window length (power of two, ≥ 2).
    pub t_hhl: usize,
    /// Evolution time scale.
    pub t0: f64,
    /// Rotation constant; `None` means 0.5/κ(Â) of the spectrum at hand.
    pub c: Option<f64>,
    pub p_fail: f64,
}

impl QpeConfig {
    /// Window length equal to `t0` rounded up to a power of two.
    pub fn for_t0(t0: f64) -> Self {
        let t_hhl = (t0.ceil() as usize).next_power_of_two().max(2);
        Self { t_hhl, t0, c: None, p_fail: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_hhl < 2 || !self.t_hhl.is_power_of_two() {
            return Err(Error::Invalid(format!("T_HHL = {} must be a power of two ≥ 2", self.t_hhl)));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::Invalid("t0 must be positive".into()));
        }
        if let Some(cc) = self.c {
            if !(cc > 0.0 && cc < 1.0) {
                return Err(Error::Invalid(format!("rotation constant C = {cc} outside (0, 1)")));
            }
        }
        if !(self.p_fail > 0.0 && self.p_fail < 1.0) || (self.t_hhl as f64) < 1.0 / self.p_fail.sqrt() {
            return Err(Error::Invalid(format!(
                "T_HHL = {} too short for p_fail = {} (need ≥ 1/√p_fail)",
                self.t_hhl, self.p_fail
            )));
        }
        Ok(())
    }
}

/// Sine window √(2/T) sin(π(τ+½)/T), τ = 0..T−1. Unit norm for T ≥ 2; at T = 1
/// the single entry is √2.
pub fn window_state(t_hhl: usize) -> Vec<f64> {
    let t = t_hhl as f64;
    (0..t_hhl).map(|tau| (2.0 / t).sqrt() * (PI * (tau as f64 + 0.5) / t).sin()).collect()
}

/// Σ_{τ<T} e^{iθτ}, via the Dirichlet kernel.
fn geometric_sum(theta: f64, t: usize) -> C64 {
    let tf = t as f64;
    let half = 0.5 * theta;
    let s = half.sin();
    let d = if s.abs() < 1e-12 { tf * (tf * half).cos() / half.cos() } else { (tf * half).sin() / s };
    C64::from_polar(d, half * (tf - 1.0))
}

/// Amplitude on bin `k` of phase estimation with the sine window, for scaled
/// eigenvalue `lam_hat` and evolution time `t0`.
pub fn qpe_amplitude(lam_hat: f64, k: usize, cfg: &QpeConfig) -> C64 {
    let t = cfg.t_hhl;
    let tf = t as f64;
    let phi = lam_hat * cfg.t0 / tf - 2.0 * PI * k as f64 / tf;
    let a = PI / tf;
    let s = (C64::from_polar(1.0, 0.5 * a) * geometric_sum(phi + a, t)
        - C64::from_polar(1.0, -0.5 * a) * geometric_sum(phi - a, t))
        / C64::new(0.0, 2.0);
    s * ((2.0 / tf).sqrt() / tf.sqrt())
}

/// Per-eigenvalue outcome of simulated phase-estimation inversion.
#[derive(Clone, Debug)]
pub struct QpeResult {
    /// Estimated 1/λ in the caller's units.
    pub inv_estimates: Vec<f64>,
    /// Probability of the rotation ancilla flagging success.
    pub success_probs: Vec<f64>,
    /// Read-out scaled eigenvalue per input.
    pub lambda_hat_est: Vec<f64>,
    /// Probability mass on bins with |λ̂'| > 1.
    pub leakage: Vec<f64>,
    /// Normalization ‖A‖ = max |λ|.
    pub norm: f64,
    pub c: f64,
}

/// Simulates windowed phase estimation plus the C/λ̂' rotation on each eigenvalue.
///
/// The estimate is read from the most probable bin; success probabilities are
/// computed from the full bin distribution, never sampled.
pub fn qpe_invert(eigenvalues: &[f64], cfg: &QpeConfig) -> Result<QpeResult> {
    cfg.validate()?;
    if eigenvalues.is_empty() {
        return Err(Error::Invalid("empty spectrum".into()));
    }
    if eigenvalues.iter().any(|&l| l == 0.0 || !l.is_finite()) {
        return Err(Error::Singular("zero or non-finite eigenvalue".into()));
    }
    let norm = eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let min = eigenvalues.iter().fold(f64::INFINITY, |m, l| m.min(l.abs()));
    let kappa = norm / min;
    let cc = cfg.c.unwrap_or(0.5 / kappa);
    let signed = eigenvalues.iter().any(|&l| l < 0.0);
    let t = cfg.t_hhl;
    let limit = if signed { t as f64 / 2.0 } else { t as f64 };
    // max |λ̂| is 1 by construction
    if cfg.t0 / (2.0 * PI) >= limit {
        return Err(Error::Aliasing(format!("max|λ̂|·t0/2π = {:.3} ≥ {limit} bins", cfg.t0 / (2.0 * PI))));
    }
    let bin_value = |k: usize| {
        let kk = if signed && k >= t / 2 { k as f64 - t as f64 } else { k as f64 };
        2.0 * PI * kk / cfg.t0
    };
    let per: Vec<(f64, f64, f64, f64)> = eigenvalues
        .par_iter()
        .map(|&lam| {
            let lh = lam / norm;
            let mut best = (0usize, -1.0f64);
            let mut success = 0.0;
            let mut leak = 0.0;
            for k in 0..t {
                let p = qpe_amplitude(lh, k, cfg).norm_sqr();
                if p > best.1 {
                    best = (k, p);
                }
                let lk = bin_value(k);
                let rot = if lk.abs() <= cc { 1.0 } else { cc / lk.abs() };
                success += p * rot * rot;
                if lk.abs() > 1.0 {
                    leak += p;
                }
            }
            let est = bin_value(best.0);
            let inv = if est == 0.0 { f64::INFINITY } else { 1.0 / (est * norm) };
            (inv, success, est, leak)
        })
        .collect();
    Ok(QpeResult {
        inv_estimates: per.iter().map(|p| p.0).collect(),
        success_probs: per.iter().map(|p| p.1).collect(),
        lambda_hat_est: per.iter().map(|p| p.2).collect(),
        leakage: per.iter().map(|p| p.3).collect(),
        norm,
        c: cc,
    })
}

/// Which fast-forwardable factor to invert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    A1,
    A2,
}

/// Eigenvalues of a factor in its diagonalizing basis (position for A1,
/// centered Fourier for A2).
pub fn factor_spectrum(kind: Factor, spec: &GridSpec, params: &MarketParams) -> Vec<f64> {
    match kind {
        Factor::A1 => grid::build_a1(spec, params),
        Factor::A2 => grid::eta_hat_diag(spec.n_eta).iter().map(|e| e * e / spec.delta_eta_hat.powi(2)).collect(),
    }
}

/// Exact inverse through reciprocal eigenvalues.
pub fn fast_invert_exact(kind: Factor, spec: &GridSpec, params: &MarketParams, floor: f64) -> Result<CMat> {
    let eig = factor_spectrum(kind, spec, params);
    if let Some(l) = eig.iter().find(|l| l.abs() < floor) {
        return Err(Error::Singular(format!("{kind:?} eigenvalue {l:e} below floor {floor:e}")));
    }
    let inv: Vec<f64> = eig.iter().map(|l| 1.0 / l).collect();
    Ok(match kind {
        Factor::A1 => CMat::from_diagonal(&CVec::from_iterator(inv.len(), inv.into_iter().map(c))),
        Factor::A2 => grid::fourier_conjugate(spec.n_eta, &inv),
    })
}

/// How the factor inverses are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum InversionMode {
    Exact,
    Qpe { t0_a1: f64, t0_a2: f64 },
}

/// Inverse eigenvalues of A1 and A2 under the chosen mode.
pub fn factor_inverse_spectra(
    spec: &GridSpec,
    params: &MarketParams,
    mode: &InversionMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let e1 = factor_spectrum(Factor::A1, spec, params);
    let e2 = factor_spectrum(Factor::A2, spec, params);
    if e1.iter().chain(&e2).any(|&l| l == 0.0) {
        return Err(Error::Singular("factor has a zero eigenvalue".into()));
    }
    match mode {
        InversionMode::Exact => Ok((e1.iter().map(|l| 1.0 / l).collect(), e2.iter().map(|l| 1.0 / l).collect())),
        InversionMode::Qpe { t0_a1, t0_a2 } => {
            let r1 = qpe_invert(&e1, &QpeConfig::for_t0(*t0_a1))?;
            let r2 = qpe_invert(&e2, &QpeConfig::for_t0(*t0_a2))?;
            Ok((r1.inv_estimates, r2.inv_estimates))
        }
    }
}

/// Conditioning of a splitting `A + B` and of W = I + A⁻¹B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditionReport {
    pub kappa_raw: f64,
    #[serde(rename = "kappa_W")]
    pub kappa_w: f64,
    #[serde(rename = "C_AB")]
    pub c_ab: f64,
    #[serde(rename = "C_AB_prime")]
    pub c_ab_prime: f64,
    pub norm_b: f64,
    pub norm_a_inv: f64,
    pub norm_ab_inv: f64,
    pub bound_satisfied: bool,
    /// "svd" for exact dense singular values, "power" for iterative estimates.
    pub method: String,
}

/// Splitting report from dense `A` and `B`.
pub fn splitting_report(a: &CMat, b: &CMat) -> Result<PreconditionReport> {
    let n = a.nrows();
    let a_inv = inverse(a)?;
    let w = CMat::identity(n, n) + &a_inv * b;
    let ab = a + b;
    let norm_b = spectral_norm(b);
    let norm_a_inv = spectral_norm(&a_inv);
    let norm_ab_inv = inverse_norm(&ab);
    let c_ab = 1.0 + norm_ab_inv * norm_b;
    let c_ab_prime = 1.0 + norm_a_inv * norm_b;
    let kappa_w = condition_number(&w);
    Ok(PreconditionReport {
        kappa_raw: condition_number(&ab),
        kappa_w,
        c_ab,
        c_ab_prime,
        norm_b,
        norm_a_inv,
        norm_ab_inv,
        bound_satisfied: kappa_w <= c_ab * c_ab_prime * (1.0 + 1e-10),
        method: "svd".into(),
    })
}

/// Preconditioned pricing system in Kronecker form.
pub struct Preconditioned {
    /// W = I ⊗ (I + G C_η2) + C_time ⊗ G with G = A2⁻¹ A1⁻¹.
    pub w: KronSum,
    /// (I ⊗ G) |b̂⟩.
    pub rhs_pre: Vec<C64>,
    /// A + B = I ⊗ (A2 + A1⁻¹ C_η2) + C_time ⊗ A1⁻¹.
    pub a_plus_b: KronSum,
    /// I ⊗ A2⁻¹ restricted to the η register.
    pub a2_inv: CMat,
    pub a1_inv: Vec<f64>,
    pub norm_b: f64,
    pub rhs_hat: CVec,
    pub report: Option<PreconditionReport>,
}

/// Settings for [`precondition`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditionOptions {
    pub mode: InversionMode,
    /// Compute the conditioning report.
    pub report: bool,
    /// Largest dimension for dense SVD-based reports; above it power iteration is used.
    pub svd_cap: usize,
}

impl Default for PreconditionOptions {
    fn default() -> Self {
        Self { mode: InversionMode::Exact, report: true, svd_cap: 1 << 10 }
    }
}

/// Applies A1⁻¹, identifies A and B, and forms W and the preconditioned RHS.
pub fn precondition(spec: &GridSpec, params: &MarketParams, opts: &PreconditionOptions) -> Result<Preconditioned> {
    spec.validate()?;
    let (a1_inv, a2_inv_eig) = factor_inverse_spectra(spec, params, &opts.mode)?;
    let ops = grid::build_operators(spec, params);
    let ne = spec.n_eta_pts();
    let nt = spec.n_tau_pts();
    let a1m = CMat::from_diagonal(&CVec::from_iterator(ne, a1_inv.iter().map(|&v| c(v))));
    let a2_inv = grid::fourier_conjugate(spec.n_eta, &a2_inv_eig);
    let g = &a2_inv * &a1m;
    let id_e = CMat::identity(ne, ne);
    let id_t = CMat::identity(nt, nt);
    let w = KronSum::new(nt, ne).with(id_t.clone(), &id_e + &g * &ops.c_eta2).with(ops.c_time.clone(), g.clone());
    let a_plus_b =
        KronSum::new(nt, ne).with(id_t.clone(), &ops.a2 + &a1m * &ops.c_eta2).with(ops.c_time.clone(), a1m.clone());
    let rhs_pre = KronSum::new(nt, ne).with(id_t, g).apply(ops.rhs_hat.as_slice());
    let mut pre =
        Preconditioned { w, rhs_pre, a_plus_b, a2_inv, a1_inv, norm_b: ops.norm_b, rhs_hat: ops.rhs_hat, report: None };
    if opts.report {
        pre.report = Some(if spec.dim() <= opts.svd_cap { pre.dense_report()? } else { pre.estimated_report()? });
    }
    Ok(pre)
}

impl Preconditioned {
    pub fn dim(&self) -> usize {
        self.w.dim()
    }

    /// B = (A + B) − I ⊗ A2 in Kronecker form.
    fn b_operator(&self) -> KronSum {
        let (id_t, x) = &self.a_plus_b.terms[0];
        let a2 = inverse(&self.a2_inv).expect("A2⁻¹ invertible");
        let mut b = self.a_plus_b.clone();
        b.terms[0] = (id_t.clone(), x - a2);
        b
    }

    fn dense_report(&self) -> Result<PreconditionReport> {
        let cap = usize::MAX;
        let w = self.w.to_dense(cap)?;
        let ab = self.a_plus_b.to_dense(cap)?;
        let b = self.b_operator().to_dense(cap)?;
        let norm_b = spectral_norm(&b);
        let norm_a_inv = spectral_norm(&self.a2_inv);
        let norm_ab_inv = inverse_norm(&ab);
        let c_ab = 1.0 + norm_ab_inv * norm_b;
        let c_ab_prime = 1.0 + norm_a_inv * norm_b;
        let kappa_w = condition_number(&w);
        Ok(PreconditionReport {
            kappa_raw: condition_number(&ab),
            kappa_w,
            c_ab,
            c_ab_prime,
            norm_b,
            norm_a_inv,
            norm_ab_inv,
            bound_satisfied: kappa_w <= c_ab * c_ab_prime * (1.0 + 1e-10),
            method: "svd".into(),
        })
    }

    fn estimated_report(&self) -> Result<PreconditionReport> {
        let dim = self.dim();
        let iters = 300;
        let est = |op: &KronSum| {
            let adj = op.adjoint();
            norm_estimate(|x| op.apply(x), |x| adj.apply(x), dim, iters, 1)
        };
        let inv_est = |op: &KronSum| -> Result<f64> {
            let s = KronSylvester::from_kron_sum(op)?;
            let sa = KronSylvester::from_kron_sum(&op.adjoint())?;
            Ok(norm_estimate(|x| s.solve(x), |x| sa.solve(x), dim, iters, 2))
        };
        let norm_b = est(&self.b_operator());
        let norm_a_inv = spectral_norm(&self.a2_inv);
        let norm_ab_inv = inv_est(&self.a_plus_b)?;
        let kappa_raw = est(&self.a_plus_b) * norm_ab_inv;
        let kappa_w = est(&self.w) * inv_est(&self.w)?;
        let c_ab = 1.0 + norm_ab_inv * norm_b;
        let c_ab_prime = 1.0 + norm_a_inv * norm_b;
        Ok(PreconditionReport {
            kappa_raw,
            kappa_w,
            c_ab,
            c_ab_prime,
            norm_b,
            norm_a_inv,
            norm_ab_inv,
            bound_satisfied: kappa_w <= c_ab * c_ab_prime * (1.0 + 1e-10),
            method: "power".into(),
        })
    }

    /// ‖W⁻¹‖, exact (SVD) at or below `svd_cap`, otherwise a power-iteration estimate.
    pub fn w_inverse_norm(&self, svd_cap: usize) -> Result<f64> {
        if self.dim() <= svd_cap {
            return Ok(inverse_norm(&self.w.to_dense(usize::MAX)?));
        }
        let s = KronSylvester::from_kron_sum(&self.w)?;
        let sa = KronSylvester::from_kron_sum(&self.w.adjoint())?;
        Ok(norm_estimate(|x| s.solve(x), |x| sa.solve(x), self.dim(), 300, 3))
    }
}

/// Linear solver used in place of the block-encoded W⁻¹.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Dense LU up to `dense_cap`, structured Schur solve above.
    Auto,
    DenseLu,
    Gmres,
    KronSchur,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    /// |ψ̃⟩, solution of W x = rhs_pre (equivalently of the original system with RHS |b̂⟩).
    pub x: Vec<C64>,
    pub relative_residual: f64,
    pub iterations: usize,
    pub method: SolverKind,
}

impl SolveOutcome {
    /// ψ on the lattice: the solution rescaled by √N_b.
    pub fn psi(&self, norm_b: f64) -> Vec<C64> {
        let s = norm_b.sqrt();
        self.x.iter().map(|z| z * s).collect()
    }
}

/// Dense solve with residual check.
pub fn solve_system(w: &CMat, rhs: &[C64]) -> Result<Vec<C64>> {
    if w.nrows() != rhs.len() || !w.is_square() {
        return Err(Error::DimensionMismatch(format!("{}×{} system, rhs {}", w.nrows(), w.ncols(), rhs.len())));
    }
    let b = CVec::from_column_slice(rhs);
    let x = w.clone().lu().solve(&b).ok_or_else(|| Error::Singular("LU solve failed".into()))?;
    let res = relative_residual(&(w * &x - &b).as_slice().to_vec(), rhs);
    if res >= 1e-10 {
        return Err(Error::NoConvergence(format!("dense residual {res:.3e}")));
    }
    Ok(x.as_slice().to_vec())
}

fn relative_residual(r: &[C64], b: &[C64]) -> f64 {
    let nb = vec_norm(b);
    if nb == 0.0 {
        vec_norm(r)
    } else {
        vec_norm(r) / nb
    }
}

/// Solves the preconditioned system W x = rhs_pre.
pub fn solve_preconditioned(pre: &Preconditioned, kind: SolverKind, dense_cap: usize) -> Result<SolveOutcome> {
    let dim = pre.dim();
    let method = match kind {
        SolverKind::Auto if dim <= dense_cap => SolverKind::DenseLu,
        SolverKind::Auto => SolverKind::KronSchur,
        k => k,
    };
    let (x, iterations) = match method {
        SolverKind::DenseLu => (solve_system(&pre.w.to_dense(dense_cap)?, &pre.rhs_pre)?, 0),
        SolverKind::KronSchur => (KronSylvester::from_kron_sum(&pre.w)?.solve(&pre.rhs_pre), 0),
        SolverKind::Gmres => gmres(|v| pre.w.apply(v), &pre.rhs_pre, None, 1e-11, 200, 20_000)?,
        SolverKind::Auto => unreachable!(),
    };
    let r: Vec<C64> = pre.w.apply(&x).iter().zip(&pre.rhs_pre).map(|(a, b)| a - b).collect();
    let relative_residual = relative_residual(&r, &pre.rhs_pre);
    if relative_residual >= 1e-10 {
        return Err(Error::NoConvergence(format!("{method:?} residual {relative_residual:.3e}")));
    }
    Ok(SolveOutcome { x, relative_residual, iterations, method })
}

/// Residual of the original (unpreconditioned) system for a candidate |ψ̃⟩.
pub fn original_residual(spec: &GridSpec, params: &MarketParams, x: &[C64]) -> f64 {
    let ops = grid::build_operators(spec, params);
    let mx = ops.system().apply(x);
    let r: Vec<C64> = mx.iter().zip(ops.rhs_hat.iter()).map(|(a, b)| a - b).collect();
    relative_residual(&r, ops.rhs_hat.as_slice())
}

/// Dense W from dense A, B (for small randomized checks).
pub fn dense_w(a: &CMat, b: &CMat) -> Result<CMat> {
    let n = a.nrows();
    Ok(CMat::identity(n, n) + inverse(a)? * b)
}

/// I ⊗ M as a dense matrix; convenience for tests and reports.
pub fn lift_space(n_time: usize, m: &CMat) -> CMat {
    kron(&CMat::identity(n_time, n_time), m)
}
