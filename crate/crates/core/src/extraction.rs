//! Amplitude extraction: binary-segmentation prefix integrals, mock-Chebyshev
//! interpolation of the integrated density, differentiation, positive shift
//! and square root.
//!
//! Integrals are sampled at cell *edges*: edge `j` of an `N`-cell register sits
//! at `s = −1 + 2j/N`, and the prefix sum up to edge `j` covers cells `0..j`.
//! Amplitude-estimation cost is accounted (1/ε′ per call), not simulated.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::StateVector;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::linalg::{vec_norm, C64};
use crate::params::MarketParams;

/// One binary segment: shift the register down by `shift`, then measure the top
/// `measured` qubits on zero; the block covers `size = 2^(n − measured)` states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub shift: usize,
    pub measured: u32,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub n: u32,
    pub segments: Vec<Segment>,
    pub covered: usize,
}

/// Decomposes the window `[x_i, x_f]` of an `n`-qubit register into strictly
/// decreasing power-of-two blocks, high bit first.
pub fn plan_segments(x_i: usize, x_f: usize, n: u32) -> Result<SegmentationPlan> {
    if n >= usize::BITS || x_i > x_f || x_f >= 1usize << n {
        return Err(Error::Invalid(format!("window [{x_i}, {x_f}] outside a {n}-qubit register")));
    }
    let mut segments = Vec::new();
    let mut w = x_i;
    while w <= x_f {
        let remaining = x_f - w + 1;
        let m = n - remaining.ilog2();
        let size = 1usize << (n - m);
        segments.push(Segment { shift: w, measured: m, size });
        w += size;
    }
    Ok(SegmentationPlan { n, segments, covered: x_f - x_i + 1 })
}

/// How amplitude estimates are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// True √q.
    Exact,
    /// √q plus uniform noise in [−ε′, ε′].
    Stochastic,
    /// √q + ε′, the worst case of the error model.
    Adversarial,
    /// Binomial sampling with a fixed shot count.
    Shots,
}

/// Amplitude-estimation model; every call is charged 1/ε′ (or `shots`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeEstimator {
    pub mode: EstimatorMode,
    pub eps_prime: f64,
    pub seed: u64,
    pub shots: u64,
}

/// One estimated probability with its error bound and cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub bound: f64,
    pub cost: f64,
}

impl AmplitudeEstimator {
    pub fn exact(eps_prime: f64) -> Self {
        Self { mode: EstimatorMode::Exact, eps_prime, seed: 0, shots: 0 }
    }

    pub fn stochastic(eps_prime: f64, seed: u64) -> Self {
        Self { mode: EstimatorMode::Stochastic, eps_prime, seed, shots: 0 }
    }

    pub fn adversarial(eps_prime: f64) -> Self {
        Self { mode: EstimatorMode::Adversarial, eps_prime, seed: 0, shots: 0 }
    }

    pub fn shots(shots: u64, seed: u64) -> Self {
        Self { mode: EstimatorMode::Shots, eps_prime: 1.0 / (shots.max(1) as f64).sqrt(), seed, shots }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_prime > 0.0 && self.eps_prime.is_finite()) {
            return Err(Error::Invalid(format!("ε′ = {} must be positive", self.eps_prime)));
        }
        if self.mode == EstimatorMode::Shots && self.shots == 0 {
            return Err(Error::Invalid("shots mode needs at least one shot".into()));
        }
        Ok(())
    }

    /// Independent random stream for node pair (k, l).
    pub fn stream(&self, k: u64, l: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((k << 32) | l);
        rng
    }

    pub fn cost_per_call(&self) -> f64 {
        match self.mode {
            EstimatorMode::Shots => self.shots as f64,
            _ => 1.0 / self.eps_prime,
        }
    }

    /// Estimates probability `q` by estimating √q and squaring.
    pub fn estimate(&self, q: f64, rng: &mut ChaCha8Rng) -> Probe {
        let q = q.clamp(0.0, 1.0);
        let e = self.eps_prime;
        let cost = self.cost_per_call();
        match self.mode {
            EstimatorMode::Exact => Probe { value: q, bound: 0.0, cost },
            EstimatorMode::Stochastic | EstimatorMode::Adversarial => {
                let noise =
                    if self.mode == EstimatorMode::Stochastic { e * (2.0 * rng.random::<f64>() - 1.0) } else { e };
                let amp = (q.sqrt() + noise).max(0.0);
                let value = amp * amp;
                // |q̃ − q| ≤ 2ε′√q + ε′², with √q ≤ √q̃ + ε′
                let bound = 2.0 * e * (value.sqrt() + e) + e * e;
                Probe { value, bound, cost }
            }
            EstimatorMode::Shots => {
                let k = Binomial::new(self.shots, q).map(|d| d.sample(rng)).unwrap_or(0);
                let value = k as f64 / self.shots as f64;
                let var = (value * (1.0 - value)).max(1.0 / self.shots as f64) / self.shots as f64;
                Probe { value, bound: 3.0 * var.sqrt(), cost }
            }
        }
    }
}

/// Result of a 1-D window integral.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowEstimate {
    /// Σ_{x_i..=x_f} |amp_x|² / 2^n.
    pub value: f64,
    pub err_bound: f64,
    pub calls: usize,
    pub cost: f64,
    pub warnings: Vec<String>,
}

/// Estimates the probability integral over `[x_i, x_f]` by shift-and-measure
/// on the whole register of `state`.
pub fn estimate_window_integral(
    state: &StateVector,
    x_i: usize,
    x_f: usize,
    est: &AmplitudeEstimator,
) -> Result<WindowEstimate> {
    est.validate()?;
    let n = state.n_qubits();
    let plan = plan_segments(x_i, x_f, n)?;
    let mut rng = est.stream(0, 0);
    let flat = StateVector::single(state.amplitudes.clone(), "x")?;
    let mut sum = 0.0;
    let mut bound = 0.0;
    let mut cost = 0.0;
    let mut warnings = Vec::new();
    for seg in &plan.segments {
        let mut shifted = flat.clone();
        shifted.shift_register("x", -(seg.shift as i64))?;
        let q = shifted.prob_top_zero(&[("x", seg.measured)])?;
        if est.mode != EstimatorMode::Exact && q < est.eps_prime * est.eps_prime {
            warnings.push(format!(
                "segment at {} has probability {q:.2e} < ε′²; noise dominates its square root",
                seg.shift
            ));
        }
        let p = est.estimate(q, &mut rng);
        sum += p.value;
        bound += p.bound;
        cost += p.cost;
    }
    let scale = (1u64 << n) as f64;
    Ok(WindowEstimate { value: sum / scale, err_bound: bound / scale, calls: plan.segments.len(), cost, warnings })
}

/// Chebyshev points s_k = cos((2k−1)π/(2M)), k = 1..M.
pub fn chebyshev_nodes(m: usize) -> Vec<f64> {
    (1..=m).map(|k| ((2 * k - 1) as f64 * PI / (2 * m) as f64).cos()).collect()
}

/// Chebyshev nodes snapped to available grid points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    /// Index into the candidate list (grid index).
    pub indices: Vec<usize>,
    pub s_exact: Vec<f64>,
    pub s_snapped: Vec<f64>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Largest |s_k − s′_k|.
    pub fn max_offset(&self) -> f64 {
        self.s_exact.iter().zip(&self.s_snapped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Snaps the `m` Chebyshev nodes to the nearest candidates; ties go toward the
/// grid centre. With `fallback`, a collision takes the next-nearest unused
/// point; without it a collision is an error.
pub fn snap_nodes(m: usize, candidates: &[f64], fallback: bool) -> Result<NodeSet> {
    if m == 0 || m > candidates.len() {
        return Err(Error::Invalid(format!("{m} nodes from {} grid points", candidates.len())));
    }
    let s_exact = chebyshev_nodes(m);
    let mut used = vec![false; candidates.len()];
    let mut indices = Vec::with_capacity(m);
    for &s in &s_exact {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (candidates[a] - s).abs();
            let db = (candidates[b] - s).abs();
            let by_distance = if (da - db).abs() <= 1e-12 { std::cmp::Ordering::Equal } else { da.total_cmp(&db) };
            by_distance.then(candidates[a].abs().total_cmp(&candidates[b].abs()))
        });
        let pick = if fallback {
            order.into_iter().find(|&i| !used[i]).expect("m ≤ candidate count")
        } else {
            let i = order[0];
            if used[i] {
                return Err(Error::NodeCollision(format!("two Chebyshev nodes snap to grid index {i}")));
            }
            i
        };
        used[pick] = true;
        indices.push(pick);
    }
    let s_snapped = indices.iter().map(|&i| candidates[i]).collect();
    Ok(NodeSet { indices, s_exact, s_snapped })
}

/// Mock-Chebyshev nodes on the `n` cell centres of grid indices `lo..=hi`,
/// s = −1 + (2(i − lo) + 1)/n. Returned indices are grid indices.
pub fn mock_cheb_nodes(m: usize, n: usize, lo: usize, hi: usize) -> Result<NodeSet> {
    if hi < lo || hi - lo + 1 != n {
        return Err(Error::Invalid(format!("range {lo}..={hi} does not hold {n} points")));
    }
    let cand: Vec<f64> = (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect();
    let mut set = snap_nodes(m, &cand, false)?;
    set.indices.iter_mut().for_each(|i| *i += lo);
    Ok(set)
}

/// Edge positions s = −1 + 2j/n, j = 0..=n.
pub fn edge_candidates(n: usize) -> Vec<f64> {
    (0..=n).map(|j| -1.0 + 2.0 * j as f64 / n as f64).collect()
}

/// T_n(s) by recurrence.
pub fn cheb_t(n: usize, s: f64) -> f64 {
    let (mut a, mut b) = (1.0, s);
    if n == 0 {
        return a;
    }
    for _ in 1..n {
        (a, b) = (b, 2.0 * s * b - a);
    }
    b
}

/// U_n(s) by recurrence.
pub fn cheb_u(n: usize, s: f64) -> f64 {
    let (mut a, mut b) = (1.0, 2.0 * s);
    if n == 0 {
        return a;
    }
    for _ in 1..n {
        (a, b) = (b, 2.0 * s * b - a);
    }
    b
}

/// Normalization of u_j: √(1/M) for j = 0, √(2/M) otherwise.
fn basis_norm(j: usize, m: usize) -> f64 {
    if j == 0 {
        (1.0 / m as f64).sqrt()
    } else {
        (2.0 / m as f64).sqrt()
    }
}

/// u_j(s) and its first two derivatives for j < m. Uses dT_n/ds = n U_{n−1}(s)
/// and the differentiated three-term recurrence for T″.
pub fn basis(m: usize, s: f64) -> [Vec<f64>; 3] {
    let mut t = vec![0.0; m];
    let mut d1 = vec![0.0; m];
    let mut d2 = vec![0.0; m];
    for j in 0..m {
        t[j] = match j {
            0 => 1.0,
            1 => s,
            _ => 2.0 * s * t[j - 1] - t[j - 2],
        };
        d1[j] = if j == 0 { 0.0 } else { j as f64 * cheb_u(j - 1, s) };
        d2[j] = match j {
            0 | 1 => 0.0,
            _ => 4.0 * d1[j - 1] + 2.0 * s * d2[j - 1] - d2[j - 2],
        };
    }
    for j in 0..m {
        let c = basis_norm(j, m);
        t[j] *= c;
        d1[j] *= c;
        d2[j] *= c;
    }
    [t, d1, d2]
}

/// Chebyshev-Vandermonde matrix V_kj = u_j(s_k).
pub fn vandermonde(nodes: &[f64]) -> DMatrix<f64> {
    let m = nodes.len();
    let mut v = DMatrix::zeros(m, m);
    for (k, &s) in nodes.iter().enumerate() {
        let [u, _, _] = basis(m, s);
        for j in 0..m {
            v[(k, j)] = u[j];
        }
    }
    v
}

/// (κ₂, ‖·⁻¹‖₂) of a real square matrix.
pub fn condition_and_inverse_norm(v: &DMatrix<f64>) -> (f64, f64) {
    let sv = v.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (max / min, 1.0 / min)
    }
}

/// 1-D interpolant Σ a_j u_j(s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpolant1D {
    pub coeffs: Vec<f64>,
    pub nodes: Vec<f64>,
    pub cond: f64,
    pub inv_norm: f64,
}

impl Interpolant1D {
    fn combine(&self, s: f64, which: usize) -> f64 {
        let b = basis(self.coeffs.len(), s);
        b[which].iter().zip(&self.coeffs).map(|(u, a)| u * a).sum()
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.combine(s, 0)
    }

    pub fn derivative(&self, s: f64) -> f64 {
        self.combine(s, 1)
    }

    pub fn second_derivative(&self, s: f64) -> f64 {
        self.combine(s, 2)
    }
}

/// Solves V_pert a′ = f′ at the given nodes.
pub fn fit_interpolant(samples: &[f64], nodes: &[f64], kappa_ceiling: f64) -> Result<Interpolant1D> {
    if samples.len() != nodes.len() || nodes.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} samples at {} nodes", samples.len(), nodes.len())));
    }
    let v = vandermonde(nodes);
    let (cond, inv_norm) = condition_and_inverse_norm(&v);
    if !(cond <= kappa_ceiling) {
        return Err(Error::IllConditioned(format!("κ(V_pert) = {cond:.3e} exceeds {kappa_ceiling:.3e}")));
    }
    let a = v
        .lu()
        .solve(&DVector::from_column_slice(samples))
        .ok_or_else(|| Error::Singular("Chebyshev-Vandermonde matrix".into()))?;
    Ok(Interpolant1D { coeffs: a.as_slice().to_vec(), nodes: nodes.to_vec(), cond, inv_norm })
}

/// Evaluator of Σ a′_j du_j/ds.
pub fn differentiate_interpolant(interp: &Interpolant1D) -> impl Fn(f64) -> f64 + '_ {
    move |s| interp.derivative(s)
}

/// √(v + ε) elementwise, where ε = 0 if every value is positive and otherwise
/// the smallest shift ≥ `eps_shift` that makes all values strictly positive.
pub fn positive_shift_sqrt(values: &[f64], eps_shift: f64) -> (Vec<f64>, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = if min > 0.0 {
        0.0
    } else {
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let needed = -min + (scale * f64::EPSILON * 4.0).max(f64::MIN_POSITIVE);
        eps_shift.max(needed)
    };
    (values.iter().map(|v| (v + shift).sqrt()).collect(), shift)
}

/// Maximum over s ∈ [−1, 1] of ‖(du_j/ds)_j‖₂, attained at s = ±1.
fn max_basis_derivative_norm(m: usize) -> f64 {
    basis(m, 1.0)[1].iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Tensor-product interpolant of the integrated density over (τ₁, η).
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolant2D {
    /// M_τ1 × M_η coefficients a_{lk} of u_l(s_τ) u_k(s_η).
    pub coeffs: DMatrix<f64>,
    pub nodes_eta: NodeSet,
    pub nodes_tau1: NodeSet,
    /// Physical η range mapped onto s ∈ [−1, 1].
    pub eta_range: (f64, f64),
    /// Physical τ₁ range mapped onto s ∈ [−1, 1].
    pub tau_range: (f64, f64),
    pub cells_eta: usize,
    pub cells_tau: usize,
    /// ψ = amp_scale · amplitude on the lattice.
    pub amp_scale: f64,
    pub cond_eta: f64,
    pub cond_tau: f64,
    pub inv_norm_eta: f64,
    pub inv_norm_tau: f64,
}

impl Interpolant2D {
    /// Fits samples F_{lk} taken at (τ node l, η node k).
    pub fn fit(
        samples: &DMatrix<f64>,
        nodes_tau1: NodeSet,
        nodes_eta: NodeSet,
        geometry: &Geometry,
        kappa_ceiling: f64,
    ) -> Result<Self> {
        let vt = vandermonde(&nodes_tau1.s_snapped);
        let ve = vandermonde(&nodes_eta.s_snapped);
        let (cond_tau, inv_norm_tau) = condition_and_inverse_norm(&vt);
        let (cond_eta, inv_norm_eta) = condition_and_inverse_norm(&ve);
        for (axis, k) in [("τ₁", cond_tau), ("η", cond_eta)] {
            if !(k <= kappa_ceiling) {
                return Err(Error::IllConditioned(format!(
                    "κ(V_pert) along {axis} = {k:.3e} exceeds {kappa_ceiling:.3e}"
                )));
            }
        }
        let singular = || Error::Singular("Chebyshev-Vandermonde matrix".into());
        // along τ₁ for every η node, then along η
        let x = vt.lu().solve(samples).ok_or_else(singular)?;
        let coeffs = ve.lu().solve(&x.transpose()).ok_or_else(singular)?.transpose();
        Ok(Self {
            coeffs,
            nodes_eta,
            nodes_tau1,
            eta_range: geometry.eta_range,
            tau_range: geometry.tau_range,
            cells_eta: geometry.cells_eta,
            cells_tau: geometry.cells_tau,
            amp_scale: geometry.amp_scale,
            cond_eta,
            cond_tau,
            inv_norm_eta,
            inv_norm_tau,
        })
    }

    fn to_s(x: f64, (lo, hi): (f64, f64)) -> Result<f64> {
        let tol = 1e-12 * (hi - lo);
        if x < lo - tol || x > hi + tol {
            return Err(Error::OutOfDomain(format!("{x} outside [{lo}, {hi}]")));
        }
        Ok((2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0))
    }

    /// Σ a_{lk} B_l(s_τ) C_k(s_η) for basis-derivative orders (i, j).
    fn combine(&self, eta: f64, tau: f64, i: usize, j: usize) -> Result<f64> {
        let st = Self::to_s(tau, self.tau_range)?;
        let se = Self::to_s(eta, self.eta_range)?;
        let bt = basis(self.coeffs.nrows(), st);
        let be = basis(self.coeffs.ncols(), se);
        let mut acc = 0.0;
        for l in 0..self.coeffs.nrows() {
            for k in 0..self.coeffs.ncols() {
                acc += self.coeffs[(l, k)] * bt[i][l] * be[j][k];
            }
        }
        Ok(acc)
    }

    /// Interpolated probability mass of the anchored rectangle up to (η, τ₁).
    pub fn integral(&self, eta: f64, tau: f64) -> Result<f64> {
        self.combine(eta, tau, 0, 0)
    }

    /// Conversion from ∂²S/∂s_τ∂s_η to ψ².
    fn density_factor(&self) -> f64 {
        self.amp_scale * self.amp_scale * 4.0 / (self.cells_eta * self.cells_tau) as f64
    }

    /// ψ² from the mixed derivative of the interpolant.
    pub fn psi_squared(&self, eta: f64, tau: f64) -> Result<f64> {
        Ok(self.density_factor() * self.combine(eta, tau, 1, 1)?)
    }

    /// (∂ψ²/∂η, ∂ψ²/∂τ₁) in physical units.
    pub fn psi_squared_gradient(&self, eta: f64, tau: f64) -> Result<(f64, f64)> {
        let f = self.density_factor();
        let de = 2.0 / (self.eta_range.1 - self.eta_range.0);
        let dt = 2.0 / (self.tau_range.1 - self.tau_range.0);
        Ok((f * de * self.combine(eta, tau, 1, 2)?, f * dt * self.combine(eta, tau, 2, 1)?))
    }

    /// Bound on the ψ² error induced by per-node sample errors `errors` (same
    /// layout as the samples): ‖u′_τ‖‖u′_η‖‖V_τ⁻¹‖‖V_η⁻¹‖‖E‖_F, scaled to ψ².
    pub fn propagated_bound(&self, errors: &DMatrix<f64>) -> f64 {
        self.density_factor()
            * max_basis_derivative_norm(self.coeffs.nrows())
            * max_basis_derivative_norm(self.coeffs.ncols())
            * self.inv_norm_tau
            * self.inv_norm_eta
            * errors.norm()
    }
}

/// Lattice geometry of the extraction domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub eta_range: (f64, f64),
    pub tau_range: (f64, f64),
    pub cells_eta: usize,
    pub cells_tau: usize,
    /// First time index of the extraction window.
    pub tau_start: usize,
    /// First η cell of the extraction window.
    pub eta_start: usize,
    pub amp_scale: f64,
}

impl Geometry {
    /// η cells of width δη over [−η_max, η_max]; time cells [τ_t − δ/2, τ_t + δ/2]
    /// from the first node with τ ≥ Δ.
    pub fn from_spec(spec: &GridSpec, delta: f64, amp_scale: f64) -> Self {
        let taus = spec.tau_nodes();
        let start = taus.iter().position(|&t| t >= delta - 1e-12).unwrap_or(taus.len() - 1);
        let h = spec.delta_tau1;
        Self {
            eta_range: (-spec.eta_max, spec.eta_max),
            tau_range: (taus[start] - 0.5 * h, taus[taus.len() - 1] + 0.5 * h),
            cells_eta: spec.n_eta_pts(),
            cells_tau: taus.len() - start,
            tau_start: start,
            eta_start: 0,
            amp_scale,
        }
    }

    /// Restricts η to the cells covering [lo, hi], widened outward to cell edges.
    pub fn with_eta_window(mut self, spec: &GridSpec, (lo, hi): (f64, f64)) -> Result<Self> {
        let n = spec.n_eta_pts();
        if !(lo < hi && lo >= -spec.eta_max - 1e-12 && hi <= spec.eta_max + 1e-12) {
            return Err(Error::Invalid(format!("η window [{lo}, {hi}] not inside ±{}", spec.eta_max)));
        }
        let edge = |x: f64| (x + spec.eta_max) / spec.delta_eta;
        let first = (edge(lo) + 1e-9).floor().max(0.0) as usize;
        let last = ((edge(hi) - 1e-9).ceil() as usize).min(n);
        self.eta_start = first;
        self.cells_eta = last - first;
        self.eta_range = (-spec.eta_max + first as f64 * spec.delta_eta, -spec.eta_max + last as f64 * spec.delta_eta);
        Ok(self)
    }
}

/// How segment probabilities are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Cyclic shifts and measurement of the statevector for every segment pair.
    Explicit,
    /// Same probabilities read from a 2-D prefix-sum table.
    PrefixTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub m_eta: usize,
    pub m_tau1: usize,
    /// Extraction start time; `None` uses the grid's Δ.
    pub delta: Option<f64>,
    pub kappa_ceiling: f64,
    /// Square-root shift; `None` uses the propagated ψ² bound.
    pub eps_shift: Option<f64>,
    pub probe: ProbeMode,
    /// Restrict η to a sub-interval where ψ is smooth and bounded away from
    /// zero; `None` uses the whole ±η_max range.
    #[serde(default)]
    pub eta_window: Option<(f64, f64)>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            m_eta: 8,
            m_tau1: 8,
            delta: None,
            kappa_ceiling: 100.0,
            eps_shift: None,
            probe: ProbeMode::PrefixTable,
            eta_window: None,
        }
    }
}

/// Per node pair record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub k_eta: usize,
    pub l_tau: usize,
    pub eta_edge: usize,
    pub tau_edge: usize,
    pub s_eta: f64,
    pub s_tau: f64,
    /// Estimated probability mass of the anchored rectangle.
    pub raw: f64,
    pub err_bound: f64,
    pub calls: usize,
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct Extraction {
    pub interp: Interpolant2D,
    pub nodes: Vec<NodeRecord>,
    /// Propagated bound on ψ² from sampling errors alone.
    pub psi_sq_bound: f64,
    pub eps_shift: Option<f64>,
    pub total_calls: usize,
    pub total_cost: f64,
    pub warnings: Vec<String>,
}

/// ψ on an evaluation grid, after the positive shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
    /// psi[i][j] at (tau[i], eta[j]).
    pub psi: Vec<Vec<f64>>,
    pub shift: f64,
    /// Largest propagated ψ bound, (b + ε)/√(ψ̃² + ε).
    pub psi_bound: f64,
}

impl Extraction {
    pub fn surface(&self, eta: &[f64], tau: &[f64]) -> Result<Surface> {
        let mut sq = Vec::with_capacity(eta.len() * tau.len());
        for &t in tau {
            for &e in eta {
                sq.push(self.interp.psi_squared(e, t)?);
            }
        }
        let b = self.psi_sq_bound;
        let (roots, shift) = positive_shift_sqrt(&sq, self.eps_shift.unwrap_or(b));
        let psi_bound =
            roots.iter().map(|r| if *r > 0.0 { (b + shift) / r } else { f64::INFINITY }).fold(0.0, f64::max);
        let psi = roots.chunks(eta.len().max(1)).map(|c| c.to_vec()).collect();
        Ok(Surface { eta: eta.to_vec(), tau: tau.to_vec(), psi, shift, psi_bound })
    }
}

/// Success-branch probability density ρ(t, x) on the (τ, η) lattice: every
/// other register is conditioned on zero.
fn density(state: &StateVector) -> Result<(DMatrix<f64>, u32, u32)> {
    let eta = state.register("eta")?.clone();
    let tau = state.register("tau")?.clone();
    let mut rho = DMatrix::zeros(1 << tau.len, 1 << eta.len);
    let em = (1usize << eta.len) - 1;
    let tm = (1usize << tau.len) - 1;
    let other: usize = !((em << eta.offset) | (tm << tau.offset));
    for (idx, a) in state.amplitudes.iter().enumerate() {
        if idx & other == 0 {
            rho[((idx >> tau.offset) & tm, (idx >> eta.offset) & em)] += a.norm_sqr();
        }
    }
    Ok((rho, eta.len, tau.len))
}

/// Prefix sums P[j, i] = Σ_{t<j, x<i} ρ(t, x).
fn prefix_table(rho: &DMatrix<f64>) -> DMatrix<f64> {
    let (nt, ne) = rho.shape();
    let mut p = DMatrix::zeros(nt + 1, ne + 1);
    for t in 0..nt {
        for x in 0..ne {
            p[(t + 1, x + 1)] = rho[(t, x)] + p[(t, x + 1)] + p[(t + 1, x)] - p[(t, x)];
        }
    }
    p
}

/// Probability of the (τ, η) segment pair via shift and measurement.
fn probe_explicit(state: &StateVector, st: &Segment, se: &Segment) -> Result<f64> {
    let mut s = state.clone();
    s.shift_register("eta", -(se.shift as i64))?;
    s.shift_register("tau", -(st.shift as i64))?;
    let mut cond: Vec<(&str, u32)> = vec![("eta", se.measured), ("tau", st.measured)];
    for r in &state.layout {
        if r.name != "eta" && r.name != "tau" {
            cond.push((r.name.as_str(), r.len));
        }
    }
    s.prob_top_zero(&cond)
}

/// Recovers ψ(η, τ₁) from a state with registers "eta" and "tau" (any other
/// register is an ancilla flagged on zero). ψ = `amp_scale` · amplitude.
pub fn extract_psi_2d(
    state: &StateVector,
    spec: &GridSpec,
    amp_scale: f64,
    cfg: &ExtractConfig,
    est: &AmplitudeEstimator,
) -> Result<Extraction> {
    est.validate()?;
    if cfg.m_eta < 2 || cfg.m_tau1 < 2 {
        return Err(Error::Invalid(
            "at least two nodes per axis: a constant interpolant of the integral has zero density".into(),
        ));
    }
    let mut geom = Geometry::from_spec(spec, cfg.delta.unwrap_or(spec.delta_start), amp_scale);
    if let Some(w) = cfg.eta_window {
        geom = geom.with_eta_window(spec, w)?;
    }
    let (rho, n_eta, n_tau) = density(state)?;
    if rho.ncols() != spec.n_eta_pts() || rho.nrows() != spec.n_tau_pts() {
        return Err(Error::DimensionMismatch(format!(
            "state lattice {}×{} vs grid {}×{}",
            rho.nrows(),
            rho.ncols(),
            spec.n_tau_pts(),
            spec.n_eta_pts()
        )));
    }
    let nodes_eta = snap_nodes(cfg.m_eta, &edge_candidates(geom.cells_eta), true)?;
    let nodes_tau = snap_nodes(cfg.m_tau1, &edge_candidates(geom.cells_tau), true)?;
    let table = prefix_table(&rho);
    let pairs: Vec<(usize, usize)> = (0..cfg.m_eta).flat_map(|k| (0..cfg.m_tau1).map(move |l| (k, l))).collect();
    let records: Vec<Result<(NodeRecord, Vec<String>)>> = pairs
        .par_iter()
        .map(|&(k, l)| {
            let ie = nodes_eta.indices[k];
            let jt = nodes_tau.indices[l];
            let mut rec = NodeRecord {
                k_eta: k,
                l_tau: l,
                eta_edge: ie,
                tau_edge: jt,
                s_eta: nodes_eta.s_snapped[k],
                s_tau: nodes_tau.s_snapped[l],
                raw: 0.0,
                err_bound: 0.0,
                calls: 0,
                cost: 0.0,
            };
            let mut warnings = Vec::new();
            if ie == 0 || jt == 0 {
                return Ok((rec, warnings));
            }
            let pe = plan_segments(geom.eta_start, geom.eta_start + ie - 1, n_eta)?;
            let pt = plan_segments(geom.tau_start, geom.tau_start + jt - 1, n_tau)?;
            let mut rng = est.stream(k as u64, l as u64);
            for st in &pt.segments {
                for se in &pe.segments {
                    let q = match cfg.probe {
                        ProbeMode::Explicit => probe_explicit(state, st, se)?,
                        ProbeMode::PrefixTable => {
                            let (t0, t1) = (st.shift, st.shift + st.size);
                            let (x0, x1) = (se.shift, se.shift + se.size);
                            table[(t1, x1)] - table[(t0, x1)] - table[(t1, x0)] + table[(t0, x0)]
                        }
                    };
                    if est.mode != EstimatorMode::Exact && q < est.eps_prime * est.eps_prime {
                        warnings.push(format!("node ({k}, {l}): segment probability {q:.2e} < ε′²"));
                    }
                    let p = est.estimate(q, &mut rng);
                    rec.raw += p.value;
                    rec.err_bound += p.bound;
                    rec.cost += p.cost;
                    rec.calls += 1;
                }
            }
            Ok((rec, warnings))
        })
        .collect();
    let mut nodes = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for r in records {
        let (rec, w) = r?;
        nodes.push(rec);
        warnings.extend(w);
    }
    let mut samples = DMatrix::zeros(cfg.m_tau1, cfg.m_eta);
    let mut errors = DMatrix::zeros(cfg.m_tau1, cfg.m_eta);
    for r in &nodes {
        samples[(r.l_tau, r.k_eta)] = r.raw;
        errors[(r.l_tau, r.k_eta)] = r.err_bound;
    }
    let interp = Interpolant2D::fit(&samples, nodes_tau, nodes_eta, &geom, cfg.kappa_ceiling)?;
    let psi_sq_bound = interp.propagated_bound(&errors);
    Ok(Extraction {
        total_calls: nodes.iter().map(|r| r.calls).sum(),
        total_cost: nodes.iter().map(|r| r.cost).sum(),
        interp,
        nodes,
        psi_sq_bound,
        eps_shift: cfg.eps_shift,
        warnings,
    })
}

/// Unit-norm state whose lattice density is the cell average of (g(η) h(τ₁))²,
/// on registers "eta" and "tau". Returns the state and its amplitude scale, so
/// that ψ = g·h is what [`extract_psi_2d`] should recover.
pub fn plant_separable(spec: &GridSpec, g: impl Fn(f64) -> f64, h: impl Fn(f64) -> f64) -> Result<(StateVector, f64)> {
    // 5-point Gauss-Legendre cell mean of f²
    let cell_mean = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        let x = [0.0, 0.538469310105683, -0.538469310105683, 0.906179845938664, -0.906179845938664];
        let w = [0.568888888888889, 0.478628670499366, 0.478628670499366, 0.236926885056189, 0.236926885056189];
        let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
        x.iter().zip(&w).map(|(xi, wi)| wi * f(m + r * xi).powi(2)).sum::<f64>() / 2.0
    };
    let de = spec.delta_eta;
    let gs: Vec<f64> = spec.eta_nodes().iter().map(|&e| cell_mean(&g, e - de / 2.0, e + de / 2.0)).collect();
    let h2 = spec.delta_tau1 / 2.0;
    let hs: Vec<f64> = spec.tau_nodes().iter().map(|&t| cell_mean(&h, t - h2, t + h2)).collect();
    let mut amps = Vec::with_capacity(spec.dim());
    for ht in &hs {
        for gx in &gs {
            amps.push(C64::new((gx * ht).sqrt(), 0.0));
        }
    }
    let norm = vec_norm(&amps);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Invalid("planted surface has zero or non-finite norm".into()));
    }
    amps.iter_mut().for_each(|z| *z /= norm);
    Ok((StateVector::new(amps, &[("eta", spec.n_eta), ("tau", spec.n_tau1)])?, norm))
}

/// (∂ψ/∂η, ∂ψ/∂τ₁) at a point from the interpolant.
pub fn greeks(interp: &Interpolant2D, point: (f64, f64)) -> Result<(f64, f64)> {
    let (eta, tau) = point;
    let sq = interp.psi_squared(eta, tau)?;
    let (ge, gt) = interp.psi_squared_gradient(eta, tau)?;
    if ge == 0.0 && gt == 0.0 {
        return Ok((0.0, 0.0));
    }
    if sq <= 0.0 {
        return Err(Error::Unstable(format!("ψ² = {sq:.3e} ≤ 0 at ({eta}, {tau}); square-root derivative undefined")));
    }
    let psi = sq.sqrt();
    Ok((ge / (2.0 * psi), gt / (2.0 * psi)))
}

/// Contract-level (Δ, Θ) = (∂V/∂S, ∂V/∂t) from ψ and its gradient through
/// V = S e^{−q(T−t)} ψ(η, T − t), where η scales as 1/S.
pub fn contract_greeks(
    params: &MarketParams,
    psi: f64,
    dpsi_eta: f64,
    dpsi_tau: f64,
    eta: f64,
    s: f64,
    t: f64,
) -> (f64, f64) {
    let disc = (-params.q * (params.t - t)).exp();
    let delta = disc * (psi - eta * dpsi_eta);
    let theta = s * disc * (params.q * psi - dpsi_tau);
    (delta, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn random_state(n: u32, seed: u64) -> Vec<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<C64> =
            (0..1 << n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let nn = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|z| *z /= nn);
        v
    }

    fn brute(amps: &[C64], a: usize, b: usize) -> f64 {
        amps[a..=b].iter().map(|z| z.norm_sqr()).sum::<f64>() / amps.len() as f64
    }

    #[test]
    fn plan_examples() {
        let p = plan_segments(3, 9, 4).unwrap();
        assert_eq!(p.segments.iter().map(|s| s.size).collect::<Vec<_>>(), vec![4, 2, 1]);
        assert_eq!(p.segments.iter().map(|s| s.shift).collect::<Vec<_>>(), vec![3, 7, 9]);
        assert_eq!(p.segments.iter().map(|s| s.measured).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(p.covered, 7);
        assert_eq!(plan_segments(4, 11, 4).unwrap().segments.len(), 1);
        let single = plan_segments(5, 5, 4).unwrap();
        assert_eq!(single.segments, vec![Segment { shift: 5, measured: 4, size: 1 }]);
        assert!(plan_segments(5, 4, 4).is_err());
        assert!(plan_segments(0, 16, 4).is_err());
    }

    proptest! {
        #[test]
        fn plan_is_binary_decomposition(n in 1u32..=10, a in 0usize..1024, b in 0usize..1024) {
            let size = 1usize << n;
            let (lo, hi) = ((a % size).min(b % size), (a % size).max(b % size));
            let p = plan_segments(lo, hi, n).unwrap();
            let count = hi - lo + 1;
            prop_assert_eq!(p.segments.len() as u32, count.count_ones());
            prop_assert!(p.segments.len() as u32 <= n);
            prop_assert!(p.segments.windows(2).all(|w| w[0].size > w[1].size));
            prop_assert_eq!(p.segments.iter().map(|s| s.size).sum::<usize>(), count);
        }
    }

    #[test]
    fn exact_windows_match_brute_force() {
        for seed in 0..3 {
            let amps = random_state(5, seed);
            let s = StateVector::single(amps.clone(), "x").unwrap();
            let est = AmplitudeEstimator::exact(1e-3);
            for a in 0..32 {
                for b in a..32 {
                    let w = estimate_window_integral(&s, a, b, &est).unwrap();
                    assert!((w.value - brute(&amps, a, b)).abs() < 1e-12);
                    assert_eq!(w.calls as u32, ((b - a + 1) as u32).count_ones());
                }
            }
        }
    }

    #[test]
    fn full_window_gives_inverse_dimension() {
        let s = StateVector::single(random_state(6, 8), "x").unwrap();
        let w = estimate_window_integral(&s, 0, 63, &AmplitudeEstimator::exact(0.1)).unwrap();
        assert_abs_diff_eq!(w.value, 1.0 / 64.0, epsilon = 1e-15);
        assert_eq!(w.cost, 10.0);
    }

    #[test]
    fn stochastic_error_bound() {
        let amps = random_state(6, 11);
        let qmax = amps.iter().map(|z| z.norm_sqr()).sum::<f64>();
        let s = StateVector::single(amps.clone(), "x").unwrap();
        let eps = 1e-3;
        let bound = 6.0 * (2.0 * eps * qmax.sqrt() + eps * eps) / 64.0;
        for trial in 0..1000u64 {
            let a = (trial * 7 % 64) as usize;
            let b = a + (trial * 13 % (64 - a as u64)) as usize;
            let w = estimate_window_integral(&s, a, b, &AmplitudeEstimator::stochastic(eps, trial)).unwrap();
            let err = (w.value - brute(&amps, a, b)).abs();
            assert!(err <= bound, "trial {trial}: {err}");
            assert!(err <= w.err_bound + 1e-15);
        }
    }

    #[test]
    fn adversarial_and_shots_modes() {
        let amps = random_state(4, 2);
        let s = StateVector::single(amps.clone(), "x").unwrap();
        let w = estimate_window_integral(&s, 2, 12, &AmplitudeEstimator::adversarial(1e-2)).unwrap();
        assert!(w.value > brute(&amps, 2, 12));
        assert!(w.value - brute(&amps, 2, 12) <= w.err_bound);
        let w = estimate_window_integral(&s, 2, 12, &AmplitudeEstimator::shots(100_000, 3)).unwrap();
        assert!((w.value - brute(&amps, 2, 12)).abs() <= w.err_bound);
        assert_eq!(w.cost, 100_000.0 * w.calls as f64);
        assert!(AmplitudeEstimator::shots(0, 1).validate().is_err());
    }

    #[test]
    fn tiny_segment_probability_warns() {
        let mut amps = vec![c(0.0); 8];
        amps[0] = c(1.0);
        let s = StateVector::single(amps, "x").unwrap();
        let w = estimate_window_integral(&s, 4, 7, &AmplitudeEstimator::stochastic(1e-3, 1)).unwrap();
        assert_eq!(w.warnings.len(), 1);
    }

    #[test]
    fn node_examples() {
        let s = chebyshev_nodes(2);
        assert_abs_diff_eq!(s[0], 0.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], -(0.5f64.sqrt()), epsilon = 1e-15);
        let n = mock_cheb_nodes(2, 4, 0, 3).unwrap();
        assert_eq!(n.s_snapped, vec![0.75, -0.75]);
        assert_eq!(n.indices, vec![3, 0]);
        let shifted = mock_cheb_nodes(2, 4, 10, 13).unwrap();
        assert_eq!(shifted.indices, vec![13, 10]);
        for m in [3, 5, 8] {
            let n = mock_cheb_nodes(m, 64, 0, 63).unwrap();
            assert!(n.max_offset() <= 1.0 / 64.0 + 1e-15);
        }
        assert!(matches!(mock_cheb_nodes(8, 8, 0, 7), Err(Error::NodeCollision(_))));
        assert!(mock_cheb_nodes(2, 4, 0, 4).is_err());
    }

    #[test]
    fn fallback_snapping_keeps_nodes_distinct() {
        let n = snap_nodes(8, &edge_candidates(8), true).unwrap();
        let mut idx = n.indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 8);
    }

    #[test]
    fn tie_goes_toward_centre() {
        let s = chebyshev_nodes(2)[0];
        let n = snap_nodes(2, &[s + 0.1, s - 0.1, -s - 0.1, -s + 0.1], false).unwrap();
        assert_eq!(n.indices, vec![1, 3]);
    }

    #[test]
    fn discrete_orthonormality() {
        for m in [4, 8, 16] {
            let v = vandermonde(&chebyshev_nodes(m));
            let g = v.transpose() * &v;
            assert!((g - DMatrix::identity(m, m)).abs().max() < 1e-10);
            let (k, _) = condition_and_inverse_norm(&v);
            assert!(k - 1.0 < 1e-8);
        }
    }

    #[test]
    fn derivative_identity() {
        for n in 1..10 {
            for &s in &[-1.0, -0.3, 0.2, 0.9, 1.0] {
                let h = 1e-6;
                let fd = (cheb_t(n, s + h) - cheb_t(n, s - h)) / (2.0 * h);
                if s.abs() < 1.0 {
                    assert!((fd - n as f64 * cheb_u(n - 1, s)).abs() < 1e-6 * (n * n) as f64);
                }
            }
            assert_eq!(n as f64 * cheb_u(n - 1, 1.0), (n * n) as f64);
        }
        // T″ from the recurrence against the closed form on the interior
        let m = 9;
        let s: f64 = 0.37;
        let [_, d1, d2] = basis(m, s);
        for j in 2..m {
            let c = basis_norm(j, m);
            let jf = j as f64;
            let t = cheb_t(j, s);
            let want = jf * (jf * t - s * cheb_u(j - 1, s)) / (s * s - 1.0);
            assert!((d2[j] / c - want).abs() < 1e-9 * want.abs().max(1.0));
            assert!((d1[j] / c - jf * cheb_u(j - 1, s)).abs() < 1e-12 * jf * jf);
        }
    }

    #[test]
    fn basis_reproduction_and_t2_slope() {
        let nodes = chebyshev_nodes(5);
        let u0: Vec<f64> = nodes.iter().map(|_| basis_norm(0, 5)).collect();
        let f = fit_interpolant(&u0, &nodes, 10.0).unwrap();
        assert_abs_diff_eq!(f.coeffs[0], 1.0, epsilon = 1e-12);
        assert!(f.coeffs[1..].iter().all(|a| a.abs() < 1e-12));
        assert!(differentiate_interpolant(&f)(0.3).abs() < 1e-12);
        let mut a = vec![0.0; 3];
        a[2] = 1.0 / basis_norm(2, 3);
        let t2 = Interpolant1D { coeffs: a, nodes: chebyshev_nodes(3), cond: 1.0, inv_norm: 1.0 };
        assert_abs_diff_eq!(t2.derivative(1.0), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cubic_reproduced_off_node() {
        let nodes = chebyshev_nodes(6);
        let f: Vec<f64> = nodes.iter().map(|s| s.powi(3)).collect();
        let p = fit_interpolant(&f, &nodes, 10.0).unwrap();
        for i in 0..=40 {
            let s = -1.0 + i as f64 / 20.0;
            assert!((p.eval(s) - s.powi(3)).abs() < 1e-10);
        }
    }

    #[test]
    fn sine_derivative() {
        let nodes = chebyshev_nodes(12);
        let f: Vec<f64> = nodes.iter().map(|s| (2.0 * s).sin()).collect();
        let p = fit_interpolant(&f, &nodes, 10.0).unwrap();
        let d = differentiate_interpolant(&p);
        // the truncation error of a degree-11 fit peaks at the endpoints (≈ 9e−8);
        // away from them it is below 1e−8
        for i in 0..100 {
            let s = -1.0 + 2.0 * i as f64 / 99.0;
            let tol = if s.abs() <= 0.8 { 1e-8 } else { 1e-7 };
            assert!((d(s) - 2.0 * (2.0 * s).cos()).abs() < tol, "{s}");
        }
    }

    #[test]
    fn ill_conditioning_is_rejected() {
        let nodes = [0.0, 1e-9, 0.5];
        assert!(matches!(fit_interpolant(&[0.0, 0.0, 1.0], &nodes, 1e3), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn positive_shift_examples() {
        let (r, e) = positive_shift_sqrt(&[0.04, 1.0], 0.0);
        assert_eq!(e, 0.0);
        assert_abs_diff_eq!(r[0], 0.2, epsilon = 1e-15);
        let (r, e) = positive_shift_sqrt(&[-0.01, 1.0], 0.02);
        assert_eq!(e, 0.02);
        assert_abs_diff_eq!(r[0], 0.1, epsilon = 1e-12);
        let (r, _) = positive_shift_sqrt(&[-0.5, 0.0], 0.0);
        assert!(r.iter().all(|v| *v > 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..200).map(|i| -1.0 + i as f64 / 100.0).collect();
        let noisy: Vec<f64> = s.iter().map(|x| x * x + 1.0 + 1e-4 * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let (r, _) = positive_shift_sqrt(&noisy, 0.0);
        for (x, v) in s.iter().zip(&r) {
            assert!((v - (x * x + 1.0f64).sqrt()).abs() <= 1e-4);
        }
    }

    /// Separable state with cell-averaged ψ² = g²(η)h²(τ).
    fn planted_spec(n_eta: u32, n_tau1: u32) -> GridSpec {
        let p = MarketParams::default();
        let mut g = GridSpec::with_sizes(&p, n_eta, n_tau1);
        g.delta_start = 0.25 * p.t;
        g
    }

    #[test]
    fn planted_surface_round_trip() {
        let spec = planted_spec(7, 7);
        let g = |e: f64| (0.2 * e).exp() + 0.1 * (0.3 * e).cos();
        let h = |t: f64| (-0.5 * t).exp();
        let (state, scale) = plant_separable(&spec, g, h).unwrap();
        let ex =
            extract_psi_2d(&state, &spec, scale, &ExtractConfig::default(), &AmplitudeEstimator::exact(1e-3)).unwrap();
        let geo = Geometry::from_spec(&spec, spec.delta_start, scale);
        let etas: Vec<f64> = (0..21).map(|i| -1.9 + 3.8 * i as f64 / 20.0).collect();
        let taus: Vec<f64> =
            (0..11).map(|i| geo.tau_range.0 + (geo.tau_range.1 - geo.tau_range.0) * i as f64 / 10.0).collect();
        let surf = ex.surface(&etas, &taus).unwrap();
        let mut worst = 0.0f64;
        for (i, t) in taus.iter().enumerate() {
            for (j, e) in etas.iter().enumerate() {
                worst = worst.max((surf.psi[i][j] - g(*e) * h(*t)).abs());
            }
        }
        assert!(worst < 1e-6, "max error {worst}");
        assert_eq!(surf.shift, 0.0);
        assert_eq!(ex.psi_sq_bound, 0.0);
    }

    #[test]
    fn eta_window_recovers_sub_surface() {
        let spec = planted_spec(7, 6);
        let g = |e: f64| 1.0 + 0.5 * (0.5 * e).cos();
        let h = |t: f64| 1.0 + 0.5 * t;
        let (state, scale) = plant_separable(&spec, g, h).unwrap();
        let cfg = ExtractConfig { eta_window: Some((0.3, 1.7)), ..Default::default() };
        let ex = extract_psi_2d(&state, &spec, scale, &cfg, &AmplitudeEstimator::exact(1e-3)).unwrap();
        // widened outward to cell edges (δη = 1/32)
        assert_eq!(ex.interp.eta_range, (0.28125, 1.71875));
        let mut worst = 0.0f64;
        for i in 0..=14 {
            let e = 0.3 + 0.1 * i as f64;
            let t = 0.3 + 0.045 * i as f64;
            worst = worst.max((ex.interp.psi_squared(e, t).unwrap().sqrt() - g(e) * h(t)).abs());
        }
        assert!(worst < 1e-5, "max error {worst}");
        assert!(ex.interp.psi_squared(0.0, 0.5).is_err());
        let bad = ExtractConfig { eta_window: Some((0.5, 2.5)), ..Default::default() };
        assert!(extract_psi_2d(&state, &spec, scale, &bad, &AmplitudeEstimator::exact(1e-3)).is_err());
    }

    #[test]
    fn explicit_and_table_probes_agree() {
        let spec = planted_spec(4, 4);
        let (state, scale) = plant_separable(&spec, |e| 1.0 + 0.2 * e, |t| 1.0 + t).unwrap();
        // add a flagged-failure ancilla carrying extra weight that must be ignored
        let mut amps = state.amplitudes.iter().map(|a| a * 0.8).collect::<Vec<_>>();
        amps.extend(state.amplitudes.iter().map(|a| a * 0.6));
        let s2 = StateVector::new(amps, &[("eta", 4), ("tau", 4), ("anc", 1)]).unwrap();
        let est = AmplitudeEstimator::stochastic(1e-3, 5);
        let mut cfg = ExtractConfig { m_eta: 4, m_tau1: 4, ..Default::default() };
        let a = extract_psi_2d(&s2, &spec, scale / 0.8, &cfg, &est).unwrap();
        cfg.probe = ProbeMode::Explicit;
        let b = extract_psi_2d(&s2, &spec, scale / 0.8, &cfg, &est).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert!((x.raw - y.raw).abs() < 1e-12);
            assert_eq!(x.calls, y.calls);
        }
        let s = a.surface(&[0.1], &[0.6]).unwrap();
        let s_direct = extract_psi_2d(&state, &spec, scale, &cfg, &AmplitudeEstimator::exact(1e-3))
            .unwrap()
            .surface(&[0.1], &[0.6])
            .unwrap();
        assert!((s.psi[0][0] - s_direct.psi[0][0]).abs() < 0.05 * s_direct.psi[0][0]);
    }

    #[test]
    fn extraction_is_reproducible() {
        let spec = planted_spec(4, 4);
        let (state, scale) = plant_separable(&spec, |e| 1.0 + 0.2 * e, |t| 1.0 + t).unwrap();
        let cfg = ExtractConfig { m_eta: 4, m_tau1: 4, ..Default::default() };
        let est = AmplitudeEstimator::stochastic(1e-3, 77);
        let a = extract_psi_2d(&state, &spec, scale, &cfg, &est).unwrap();
        let b = extract_psi_2d(&state, &spec, scale, &cfg, &est).unwrap();
        assert_eq!(a.nodes, b.nodes);
    }

    #[test]
    fn stochastic_extraction_within_propagated_bound() {
        let spec = planted_spec(6, 6);
        let g = |e: f64| 1.0 + 0.3 * (0.8 * e).sin();
        let h = |t: f64| (-0.5 * t).exp();
        let (state, scale) = plant_separable(&spec, g, h).unwrap();
        let cfg = ExtractConfig { m_eta: 6, m_tau1: 6, ..Default::default() };
        let exact = extract_psi_2d(&state, &spec, scale, &cfg, &AmplitudeEstimator::exact(1e-4)).unwrap();
        let noisy = extract_psi_2d(&state, &spec, scale, &cfg, &AmplitudeEstimator::stochastic(1e-4, 3)).unwrap();
        let pts = [(-1.5, 0.4), (0.0, 0.7), (1.2, 0.95)];
        for (e, t) in pts {
            let d = (noisy.interp.psi_squared(e, t).unwrap() - exact.interp.psi_squared(e, t).unwrap()).abs();
            assert!(d <= noisy.psi_sq_bound, "{d} > {}", noisy.psi_sq_bound);
        }
        assert!(noisy.psi_sq_bound > 0.0);
        assert_eq!(noisy.total_calls, exact.total_calls);
    }

    #[test]
    fn single_node_axis_is_rejected() {
        let spec = planted_spec(3, 3);
        let (state, scale) = plant_separable(&spec, |_| 1.0, |_| 1.0).unwrap();
        let cfg = ExtractConfig { m_eta: 1, m_tau1: 1, ..Default::default() };
        assert!(matches!(
            extract_psi_2d(&state, &spec, scale, &cfg, &AmplitudeEstimator::exact(1e-3)),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn greeks_of_planted_surfaces() {
        let spec = planted_spec(6, 6);
        let (state, scale) = plant_separable(&spec, |_| 0.7, |_| 0.7).unwrap();
        let cfg = ExtractConfig { m_eta: 4, m_tau1: 4, ..Default::default() };
        let ex = extract_psi_2d(&state, &spec, scale, &cfg, &AmplitudeEstimator::exact(1e-3)).unwrap();
        let (a, b) = greeks(&ex.interp, (0.3, 0.5)).unwrap();
        assert!(a.abs() < 1e-9 && b.abs() < 1e-9);

        let (state, scale) = plant_separable(&spec, |e| e, |t| t).unwrap();
        let ex =
            extract_psi_2d(&state, &spec, scale, &ExtractConfig::default(), &AmplitudeEstimator::exact(1e-3)).unwrap();
        for (e, t) in [(0.5, 0.5), (1.3, 0.8), (0.9, 0.3)] {
            let (de, dt) = greeks(&ex.interp, (e, t)).unwrap();
            assert!((de - t).abs() < 1e-8, "∂η at ({e},{t}): {de}");
            assert!((dt - e).abs() < 1e-8, "∂τ at ({e},{t}): {dt}");
        }
        assert!(matches!(greeks(&ex.interp, (3.0, 0.5)), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn contract_greeks_chain_rule() {
        let p = MarketParams { q: 0.03, ..Default::default() };
        // ψ = η: V = S e^{−q(T−t)} (I−KT)/(ST) does not depend on S
        let (d, th) = contract_greeks(&p, 0.4, 1.0, 0.0, 0.4, 2.0, 0.5);
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(th, 2.0 * (-0.03f64 * 0.5).exp() * 0.03 * 0.4, epsilon = 1e-15);
    }
}
