//! Discretized operators of the reduced Asian PDE
//!
//! ```text
//! ψ_τ − ½σ²η²ψ_ηη − (1/T − (r−q)η)ψ_η = 0,   η ∈ [−η_max, η_max]
//! ```
//!
//! on a cell-centred η lattice with spectral derivatives (centered DFT) and a
//! central-difference time lattice. Every matrix here carries the δ_τ1 factor of
//! the rescaled system unless the name says otherwise.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, kron, CMat, CVec, KronSum, C64, I, ONE};
use crate::params::MarketParams;

/// How the last time row is closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeClosure {
    /// Last row replaced by a backward difference; no terminal data.
    Outflow,
    /// Terminal value ψ(η, T) = ψ₀ fed through the central difference.
    Mirror,
}

/// Tunable constants of the scale relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Constant in δ_τ1 ≈ scale_c · δ̂_η² · ln(1/ε) / σ².
    pub scale_c: f64,
    /// Accepted multiplicative deviation of δ_τ1 from its target (≥ 1).
    pub band: f64,
    /// Constant of the smoothing bound T σ² N_η² / N_τ1 ≥ c_smooth ln(1/ε).
    pub c_smooth: f64,
    /// Largest time-register size scanned.
    pub max_n_tau1: u32,
    /// Extraction start Δ as a fraction of T.
    pub delta_frac: f64,
    pub closure: TimeClosure,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            scale_c: 1.0,
            band: std::f64::consts::SQRT_2,
            c_smooth: 1.0,
            max_n_tau1: 24,
            delta_frac: 0.25,
            closure: TimeClosure::Outflow,
        }
    }
}

/// Register sizes and lattice spacings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_eta: u32,
    pub n_tau1: u32,
    pub delta_eta_hat: f64,
    pub delta_eta: f64,
    pub delta_tau1: f64,
    /// Extraction start time Δ.
    pub delta_start: f64,
    pub eps_target: f64,
    pub eta_max: f64,
    pub t_final: f64,
    pub closure: TimeClosure,
}

impl GridSpec {
    /// Spec with explicit register sizes and no scale-relation checks.
    pub fn with_sizes(params: &MarketParams, n_eta: u32, n_tau1: u32) -> Self {
        let delta_eta_hat = 2.0 / (1u64 << n_eta) as f64;
        Self {
            n_eta,
            n_tau1,
            delta_eta_hat,
            delta_eta: params.eta_max * delta_eta_hat,
            delta_tau1: params.t / ((1u64 << n_tau1) as f64 + 1.0),
            delta_start: 0.25 * params.t,
            eps_target: f64::NAN,
            eta_max: params.eta_max,
            t_final: params.t,
            closure: TimeClosure::Outflow,
        }
    }

    pub fn closure(mut self, closure: TimeClosure) -> Self {
        self.closure = closure;
        self
    }

    pub fn n_eta_pts(&self) -> usize {
        1 << self.n_eta
    }

    pub fn n_tau_pts(&self) -> usize {
        1 << self.n_tau1
    }

    pub fn dim(&self) -> usize {
        self.n_eta_pts() * self.n_tau_pts()
    }

    /// Physical η nodes, cell-centred.
    pub fn eta_nodes(&self) -> Vec<f64> {
        eta_hat_diag(self.n_eta).into_iter().map(|e| e * self.eta_max).collect()
    }

    /// Unknown time nodes τ_t = (t+1)δ_τ1.
    pub fn tau_nodes(&self) -> Vec<f64> {
        (0..self.n_tau_pts()).map(|t| (t + 1) as f64 * self.delta_tau1).collect()
    }

    /// First time index with τ ≥ Δ.
    pub fn tau_start_index(&self) -> usize {
        self.tau_nodes().iter().position(|&t| t >= self.delta_start - 1e-12).unwrap_or(self.n_tau_pts() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_eta < 2 {
            return Err(Error::Invalid(format!(
                "2^n_eta must be divisible by 4 so payoff kinks stay off nodes (n_eta = {})",
                self.n_eta
            )));
        }
        if self.n_tau1 < 1 {
            return Err(Error::Invalid("n_tau1 must be at least 1".into()));
        }
        Ok(())
    }
}

/// Chooses the smallest time register satisfying both scale relations.
pub fn make_grid(params: &MarketParams, n_eta: u32, eps_target: f64, cfg: &GridConfig) -> Result<GridSpec> {
    params.validate()?;
    if n_eta < 2 || n_eta > 20 {
        return Err(Error::Invalid(format!("n_eta = {n_eta}: need 2 ≤ n_eta ≤ 20 so that 2^n_eta is divisible by 4")));
    }
    if !(eps_target > 0.0 && eps_target <= 1.0) {
        return Err(Error::Invalid(format!("eps_target = {eps_target} outside (0, 1)")));
    }
    if cfg.band < 1.0 || cfg.scale_c <= 0.0 {
        return Err(Error::Invalid("band must be ≥ 1 and scale_c > 0".into()));
    }
    let log_term = (1.0 / eps_target).ln();
    let d_hat = 2.0 / (1u64 << n_eta) as f64;
    let target = cfg.scale_c * d_hat * d_hat * log_term / (params.sigma * params.sigma);
    if target <= 0.0 {
        return Err(Error::InfeasibleScale("target time step is zero (eps_target = 1)".into()));
    }
    let n_eta_pts = (1u64 << n_eta) as f64;
    for n_tau1 in 1..=cfg.max_n_tau1 {
        let n_tau = (1u64 << n_tau1) as f64;
        let dt = params.t / (n_tau + 1.0);
        let in_band = dt >= target / cfg.band && dt <= target * cfg.band;
        let smooth = params.t * params.sigma.powi(2) * n_eta_pts * n_eta_pts / n_tau >= cfg.c_smooth * log_term;
        if in_band && smooth {
            let mut spec = GridSpec::with_sizes(params, n_eta, n_tau1);
            spec.delta_start = cfg.delta_frac * params.t;
            spec.eps_target = eps_target;
            spec.closure = cfg.closure;
            return Ok(spec);
        }
    }
    Err(Error::InfeasibleScale(format!(
        "no n_tau1 ≤ {} puts δ_τ1 within ×{:.3} of {target:.4e} while satisfying the smoothing bound",
        cfg.max_n_tau1, cfg.band
    )))
}

/// Central-difference time derivative with zero corners, in units of 1/time.
pub fn build_time_derivative(spec: &GridSpec) -> DMatrix<f64> {
    let n = spec.n_tau_pts();
    let h = 1.0 / (2.0 * spec.delta_tau1);
    DMatrix::from_fn(n, n, |i, j| {
        if j == i + 1 {
            h
        } else if i == j + 1 {
            -h
        } else {
            0.0
        }
    })
}

/// Correction that turns the last central-difference row into a backward
/// difference (outflow closure); zero for the mirror closure.
pub fn closure_correction(spec: &GridSpec) -> DMatrix<f64> {
    let n = spec.n_tau_pts();
    let mut e = DMatrix::zeros(n, n);
    if spec.closure == TimeClosure::Outflow {
        e[(n - 1, n - 1)] = 1.0 / spec.delta_tau1;
        if n >= 2 {
            e[(n - 1, n - 2)] = -0.5 / spec.delta_tau1;
        }
    }
    e
}

/// Time operator actually used in the system, δ_τ1-scaled: δ_τ1 (C̃_τ1 + E).
pub fn time_operator(spec: &GridSpec) -> CMat {
    let m = build_time_derivative(spec) + closure_correction(spec);
    m.map(|v| c(v * spec.delta_tau1))
}

/// Diagonal of η̂ = η/η_max: −1 + δ̂/2 + x δ̂.
pub fn eta_hat_diag(n_eta: u32) -> Vec<f64> {
    let n = 1usize << n_eta;
    let d = 2.0 / n as f64;
    (0..n).map(|x| -1.0 + 0.5 * d + x as f64 * d).collect()
}

/// Pauli-Z expansion of a diagonal operator: Σ coeff · Π_{j ∈ mask} Z_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliDiagonal {
    pub n: u32,
    /// (bit mask of Z positions, real coefficient); mask 0 is the identity.
    pub terms: Vec<(u64, f64)>,
}

impl PauliDiagonal {
    /// Reconstructs the diagonal; qubit j is bit j of the basis index.
    pub fn to_diagonal(&self) -> Vec<f64> {
        (0..1u64 << self.n)
            .map(|x| {
                self.terms.iter().map(|&(mask, coef)| if (x & mask).count_ones() % 2 == 0 { coef } else { -coef }).sum()
            })
            .collect()
    }

    pub fn alpha(&self) -> f64 {
        self.terms.iter().map(|t| t.1.abs()).sum()
    }
}

/// η̂ as a diagonal plus its decomposition η̂ = −(δ̂/2) Σ_j 2^j Z_j.
pub fn build_eta_operator(spec: &GridSpec) -> (Vec<f64>, PauliDiagonal) {
    let diag = eta_hat_diag(spec.n_eta);
    let terms = (0..spec.n_eta).map(|j| (1u64 << j, -0.5 * spec.delta_eta_hat * (1u64 << j) as f64)).collect();
    (diag, PauliDiagonal { n: spec.n_eta, terms })
}

/// Centered DFT over half-integer indices, rows and columns in ascending order.
pub fn build_centered_dft(n: u32) -> CMat {
    let size = 1usize << n;
    let half = (size as f64 - 1.0) / 2.0;
    let norm = 1.0 / (size as f64).sqrt();
    CMat::from_fn(size, size, |k, j| {
        let kh = k as f64 - half;
        let jh = j as f64 - half;
        C64::from_polar(norm, -2.0 * PI * kh * jh / size as f64)
    })
}

/// F_c† diag(d) F_c.
pub fn fourier_conjugate(n: u32, d: &[f64]) -> CMat {
    let f = build_centered_dft(n);
    let dm = CMat::from_diagonal(&CVec::from_iterator(d.len(), d.iter().map(|&v| c(v))));
    f.adjoint() * dm * f
}

/// Spectral first derivative ∂/∂η = i π/(δ̂ η_max) · F_c† η̂ F_c.
///
/// The half-integer frequencies make this exact on antiperiodic band-limited
/// data, i.e. combinations of e^{iπkη/η_max} with half-integer |k| < N/2.
pub fn build_spectral_derivative(spec: &GridSpec) -> CMat {
    let d1 = fourier_conjugate(spec.n_eta, &eta_hat_diag(spec.n_eta));
    d1 * (I * (PI / (spec.delta_eta_hat * spec.eta_max)))
}

/// Diffusion term δ_τ1 π²σ²/(2δ̂²) · η̂² F_c†η̂²F_c.
pub fn build_c_eta1(spec: &GridSpec, params: &MarketParams) -> CMat {
    let a1 = build_a1(spec, params);
    let a2 = build_a2(spec);
    CMat::from_diagonal(&CVec::from_iterator(a1.len(), a1.iter().map(|&v| c(v)))) * a2
}

/// Drift term δ_τ1 · ((r−q) η_max η̂ − 1/T) · ∂/∂η, expanded so r = q is finite.
pub fn build_c_eta2(spec: &GridSpec, params: &MarketParams) -> CMat {
    let d2 = drift_diagonal(spec, params);
    let d1 = fourier_conjugate(spec.n_eta, &eta_hat_diag(spec.n_eta));
    CMat::from_diagonal(&CVec::from_column_slice(&d2)) * d1
}

/// Diagonal factor of the drift term, i δ_τ1 π/δ̂ · ((r−q)η̂ − 1/(η_max T)).
pub fn drift_diagonal(spec: &GridSpec, params: &MarketParams) -> Vec<C64> {
    let pre = spec.delta_tau1 * PI / spec.delta_eta_hat;
    eta_hat_diag(spec.n_eta)
        .into_iter()
        .map(|e| I * (pre * ((params.r - params.q) * e - 1.0 / (spec.eta_max * spec.t_final))))
        .collect()
}

/// Diagonal of A1 = δ_τ1 π²σ² η̂² / 2.
pub fn build_a1(spec: &GridSpec, params: &MarketParams) -> Vec<f64> {
    let pre = spec.delta_tau1 * PI * PI * params.sigma * params.sigma / 2.0;
    eta_hat_diag(spec.n_eta).into_iter().map(|e| pre * e * e).collect()
}

/// A2 = F_c† η̂² F_c / δ̂².
pub fn build_a2(spec: &GridSpec) -> CMat {
    let d: Vec<f64> = eta_hat_diag(spec.n_eta).iter().map(|e| e * e / spec.delta_eta_hat.powi(2)).collect();
    fourier_conjugate(spec.n_eta, &d)
}

/// Normalized right-hand side and N_b = ⟨b|b⟩ of the δ_τ1-scaled system.
pub fn build_rhs(spec: &GridSpec, params: &MarketParams) -> (CVec, f64) {
    let b = raw_rhs(spec, params);
    let nb = b.norm_squared();
    let hat = if nb > 0.0 { b.unscale(nb.sqrt()) } else { b };
    (hat, nb)
}

/// Unnormalized right-hand side: ψ₀/2 in the first time block, −ψ₀/2 in the
/// last under the mirror closure.
pub fn raw_rhs(spec: &GridSpec, params: &MarketParams) -> CVec {
    let ne = spec.n_eta_pts();
    let nt = spec.n_tau_pts();
    let psi0: Vec<f64> = spec.eta_nodes().iter().map(|&e| params.psi0(e)).collect();
    let mut b = CVec::zeros(ne * nt);
    for (x, &p) in psi0.iter().enumerate() {
        b[x] += c(0.5 * p);
        if spec.closure == TimeClosure::Mirror {
            b[(nt - 1) * ne + x] += c(-0.5 * p);
        }
    }
    b
}

/// All factors of the system, dense in the η register.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    /// Unscaled central-difference matrix.
    pub c_tau1: DMatrix<f64>,
    /// δ_τ1-scaled time operator including the closure.
    pub c_time: CMat,
    pub c_eta1: CMat,
    pub c_eta2: CMat,
    pub a1: Vec<f64>,
    pub a2: CMat,
    pub rhs_hat: CVec,
    pub norm_b: f64,
}

pub fn build_operators(spec: &GridSpec, params: &MarketParams) -> OperatorSet {
    let (rhs_hat, norm_b) = build_rhs(spec, params);
    OperatorSet {
        c_tau1: build_time_derivative(spec),
        c_time: time_operator(spec),
        c_eta1: build_c_eta1(spec, params),
        c_eta2: build_c_eta2(spec, params),
        a1: build_a1(spec, params),
        a2: build_a2(spec),
        rhs_hat,
        norm_b,
    }
}

impl OperatorSet {
    /// C_time ⊗ I + I ⊗ (C_η1 + C_η2) in Kronecker form.
    pub fn system(&self) -> KronSum {
        let nt = self.c_time.nrows();
        let ne = self.a2.nrows();
        KronSum::new(nt, ne)
            .with(CMat::identity(nt, nt), &self.c_eta1 + &self.c_eta2)
            .with(self.c_time.clone(), CMat::identity(ne, ne))
    }

    pub fn a1_inv(&self) -> Vec<f64> {
        self.a1.iter().map(|v| 1.0 / v).collect()
    }
}

/// Dense system with its splitting M' = A + B after left-multiplying by I ⊗ A1⁻¹.
#[derive(Clone, Debug)]
pub struct AssembledSystem {
    /// C_time ⊗ I + I ⊗ C_η1 + I ⊗ C_η2.
    pub matrix: CMat,
    pub rhs_hat: CVec,
    pub norm_b: f64,
    /// I ⊗ A2.
    pub a: CMat,
    /// C_time ⊗ A1⁻¹ + I ⊗ A1⁻¹ C_η2.
    pub b: CMat,
}

pub fn assemble_system(spec: &GridSpec, params: &MarketParams, dense_cap: usize) -> Result<AssembledSystem> {
    spec.validate()?;
    let dim = spec.dim();
    if dim > dense_cap {
        return Err(Error::DimensionCap { dim, cap: dense_cap });
    }
    let ops = build_operators(spec, params);
    let nt = spec.n_tau_pts();
    let ne = spec.n_eta_pts();
    let it = CMat::identity(nt, nt);
    let ie = CMat::identity(ne, ne);
    let matrix = kron(&ops.c_time, &ie) + kron(&it, &ops.c_eta1) + kron(&it, &ops.c_eta2);
    let a1_inv = CMat::from_diagonal(&CVec::from_iterator(ne, ops.a1_inv().into_iter().map(c)));
    let a = kron(&it, &ops.a2);
    let b = kron(&ops.c_time, &a1_inv) + kron(&it, &(&a1_inv * &ops.c_eta2));
    Ok(AssembledSystem { matrix, rhs_hat: ops.rhs_hat, norm_b: ops.norm_b, a, b })
}

/// Writes a dense matrix as CSV, row-major, one "re,im" cell per entry.
pub fn write_matrix_csv<W: Write>(m: &CMat, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e},{:e}", m[(i, j)].re, m[(i, j)].im)).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV format written by [`write_matrix_csv`].
pub fn read_matrix_csv<R: std::io::Read>(input: R) -> Result<CMat> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows: Vec<Vec<C64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|cell| {
                let (re, im) = cell.split_once(',').ok_or_else(|| Error::Invalid(format!("bad cell {cell:?}")))?;
                let p = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("{s:?}: {e}")));
                Ok(C64::new(p(re)?, p(im)?))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    Ok(CMat::from_fn(n, m, |i, j| rows[i][j]))
}

/// Matrix-free description of an operator by its factors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub kind: String,
    pub n_eta: u32,
    pub n_tau1: u32,
    pub factors: Vec<FactorDescriptor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorDescriptor {
    pub name: String,
    /// One of "diagonal", "fourier_diagonal", "tridiagonal", "identity".
    pub form: String,
    pub register: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<[f64; 2]>>,
}

/// Factor-level descriptor of the assembled system.
pub fn describe_system(spec: &GridSpec, params: &MarketParams) -> OperatorDescriptor {
    let cplx = |v: &[C64]| Some(v.iter().map(|z| [z.re, z.im]).collect());
    let real = |v: &[f64]| Some(v.iter().map(|&x| [x, 0.0]).collect());
    let a2: Vec<f64> = eta_hat_diag(spec.n_eta).iter().map(|e| e * e / spec.delta_eta_hat.powi(2)).collect();
    let ct = time_operator(spec);
    let n = ct.nrows();
    let tri: Vec<[f64; 2]> = (0..n)
        .flat_map(|i| {
            let lo = if i > 0 { ct[(i, i - 1)].re } else { 0.0 };
            let hi = if i + 1 < n { ct[(i, i + 1)].re } else { 0.0 };
            [[lo, ct[(i, i)].re], [hi, 0.0]]
        })
        .collect();
    OperatorDescriptor {
        kind: "asian_pde_system".into(),
        n_eta: spec.n_eta,
        n_tau1: spec.n_tau1,
        factors: vec![
            FactorDescriptor {
                name: "C_time".into(),
                form: "tridiagonal".into(),
                register: "tau1".into(),
                values: Some(tri),
            },
            FactorDescriptor {
                name: "A1".into(),
                form: "diagonal".into(),
                register: "eta".into(),
                values: real(&build_a1(spec, params)),
            },
            FactorDescriptor {
                name: "A2".into(),
                form: "fourier_diagonal".into(),
                register: "eta".into(),
                values: real(&a2),
            },
            FactorDescriptor {
                name: "D_eta2".into(),
                form: "diagonal".into(),
                register: "eta".into(),
                values: cplx(&drift_diagonal(spec, params)),
            },
            FactorDescriptor {
                name: "D_eta1".into(),
                form: "fourier_diagonal".into(),
                register: "eta".into(),
                values: real(&eta_hat_diag(spec.n_eta)),
            },
        ],
    }
}

/// Complex identity of the given size; convenience for callers composing factors.
pub fn identity(n: usize) -> CMat {
    CMat::from_diagonal_element(n, n, ONE)
}
