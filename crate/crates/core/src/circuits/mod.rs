//! Gate-level statevector simulation and block-encodings of the system factors.
//!
//! Register convention for the full problem: η occupies qubits `0..n_eta`, the
//! time register sits above it, ancillas above both.

pub mod encoding;
pub mod op;
pub mod state;

pub use encoding::{be_apply, be_kron, be_lincomb, be_product, ApplyOutcome, BlockEncoding};
pub use op::{cyclic_shift, Op};
pub use state::{Register, StateVector};

use crate::error::{Error, Result};
use crate::grid::{self, GridSpec};
use crate::linalg::max_abs_diff;
use crate::linalg::{c, real_to_complex, CMat, C64, I};
use crate::params::MarketParams;
use op::{pauli_y, pauli_z};
use serde::Serialize;

/// Time derivative (zero-corner central difference, unscaled) as the
/// four-term LCU
///
/// ```text
/// (i/2δ) Y₀ + (i/2δ) S Y₀ S† − (i/4δ) S C^{n−1}Y S† + (i/4δ) S C^{n−1}(−Y) S†
/// ```
///
/// where `S` is the +1 cyclic shift and `C^{n−1}Y` acts on qubit 0 controlled on
/// all higher qubits being 1. The first two terms form the periodic stencil;
/// the pair of controlled terms removes its wrap-around corners.
pub fn build_ctau1_encoding(spec: &GridSpec) -> Result<BlockEncoding> {
    let n = spec.n_tau1;
    if n < 1 {
        return Err(Error::Invalid("n_tau1 must be at least 1".into()));
    }
    let d = spec.delta_tau1;
    let reg: Vec<u32> = (0..n).collect();
    let y0 = || Op::gate(vec![0], pauli_y());
    let conj_shift = |inner: Op| {
        Op::Seq(vec![
            Op::Shift { qubits: reg.clone(), amount: -1 },
            inner,
            Op::Shift { qubits: reg.clone(), amount: 1 },
        ])
    };
    let controls: Vec<(u32, bool)> = (1..n).map(|q| (q, true)).collect();
    let cy = Op::controlled(controls.clone(), y0());
    let cmy = Op::controlled(controls, Op::Seq(vec![y0(), Op::Phase(c(-1.0))]));
    let coeffs = [I / (2.0 * d), I / (2.0 * d), -I / (4.0 * d), I / (4.0 * d)];
    let ops = [y0(), conj_shift(y0()), conj_shift(cy), conj_shift(cmy)];
    BlockEncoding::lcu(&coeffs, &ops, n, "C_tau1")
}

/// Periodic stencil only (first two LCU terms) with δ = T/N.
pub fn build_ctau1_periodic_encoding(spec: &GridSpec) -> Result<BlockEncoding> {
    let n = spec.n_tau1;
    let d = spec.t_final / spec.n_tau_pts() as f64;
    let reg: Vec<u32> = (0..n).collect();
    let y0 = Op::gate(vec![0], pauli_y());
    let shifted =
        Op::Seq(vec![Op::Shift { qubits: reg.clone(), amount: -1 }, y0.clone(), Op::Shift { qubits: reg, amount: 1 }]);
    BlockEncoding::lcu(&[I / (2.0 * d), I / (2.0 * d)], &[y0, shifted], n, "C_tau1_pbc")
}

/// Time operator of the assembled system, δ_τ1 (C̃_τ1 + E), including the
/// outflow row correction `E` when that closure is selected.
pub fn build_time_encoding(spec: &GridSpec) -> Result<BlockEncoding> {
    let ct = build_ctau1_encoding(spec)?;
    let e = grid::closure_correction(spec);
    let total = if e.iter().any(|&v| v != 0.0) {
        let eb = BlockEncoding::dilation(&real_to_complex(&e), None, "E")?;
        be_lincomb(c(1.0), &ct, c(1.0), &eb)?
    } else {
        ct
    };
    let mut scaled = total.scale(c(spec.delta_tau1));
    scaled.label = "C_time".into();
    Ok(scaled)
}

/// Walsh–Hadamard expansion of a diagonal: nonzero (Z-mask, coefficient) pairs.
pub fn pauli_expansion(diag: &[C64]) -> Vec<(u64, C64)> {
    let mut a = diag.to_vec();
    let n = a.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (x, y) = (a[j], a[j + h]);
                a[j] = x + y;
                a[j + h] = x - y;
            }
        }
        h *= 2;
    }
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    a.iter()
        .enumerate()
        .map(|(m, z)| (m as u64, z / n as f64))
        .filter(|(_, z)| z.norm() > 1e-14 * scale / n as f64)
        .collect()
}

/// LCU over the identity and Z-strings of a diagonal operator. The identity slot
/// is always present when other strings are, so `k` strings use ⌈log₂(k+1)⌉
/// ancillas.
pub fn encode_diagonal(m: &CMat, n: u32) -> Result<BlockEncoding> {
    if m.nrows() != 1 << n || m.ncols() != 1 << n {
        return Err(Error::DimensionMismatch(format!("{}×{} matrix for {n} qubits", m.nrows(), m.ncols())));
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)].norm() != 0.0 {
                return Err(Error::Invalid("encode_diagonal: input has off-diagonal entries".into()));
            }
        }
    }
    let diag: Vec<C64> = (0..m.nrows()).map(|i| m[(i, i)]).collect();
    let mut terms = pauli_expansion(&diag);
    if terms.is_empty() {
        return Ok(BlockEncoding::zero(n));
    }
    if !(terms.len() == 1 && terms[0].0 == 0) && !terms.iter().any(|t| t.0 == 0) {
        terms.insert(0, (0, c(0.0)));
    }
    let ops: Vec<Op> = terms
        .iter()
        .map(|&(mask, _)| {
            Op::Seq((0..n).filter(|q| mask >> q & 1 == 1).map(|q| Op::gate(vec![q], pauli_z())).collect())
        })
        .collect();
    let coeffs: Vec<C64> = terms.iter().map(|t| t.1).collect();
    BlockEncoding::lcu(&coeffs, &ops, n, "diag")
}

/// D_η1 = F_c† η̂ F_c: the η̂ encoding conjugated by the exact centered DFT.
pub fn encode_spectral(spec: &GridSpec) -> Result<BlockEncoding> {
    let (d, _) = grid::build_eta_operator(spec);
    let m = CMat::from_diagonal(&nalgebra::DVector::from_iterator(d.len(), d.into_iter().map(c)));
    let be = encode_diagonal(&m, spec.n_eta)?;
    Ok(be.conjugate(&grid::build_centered_dft(spec.n_eta), "D_eta1"))
}

/// D_η2: the diagonal drift factor, so that C_η2 = D_η2 · D_η1.
pub fn build_d_eta2_encoding(spec: &GridSpec, params: &MarketParams) -> Result<BlockEncoding> {
    let d = grid::drift_diagonal(spec, params);
    let m = CMat::from_diagonal(&nalgebra::DVector::from_column_slice(&d));
    let mut be = encode_diagonal(&m, spec.n_eta)?;
    be.label = "D_eta2".into();
    Ok(be)
}

pub fn build_c_eta2_encoding(spec: &GridSpec, params: &MarketParams) -> Result<BlockEncoding> {
    let mut p = be_product(&build_d_eta2_encoding(spec, params)?, &encode_spectral(spec)?)?;
    p.label = "C_eta2".into();
    Ok(p)
}

/// A1⁻¹ by one-ancilla dilation, α = ‖A1⁻¹‖.
pub fn build_a1_inv_encoding(spec: &GridSpec, params: &MarketParams) -> Result<BlockEncoding> {
    let inv: Vec<C64> = grid::build_a1(spec, params).into_iter().map(|v| c(1.0 / v)).collect();
    let m = CMat::from_diagonal(&nalgebra::DVector::from_column_slice(&inv));
    BlockEncoding::dilation(&m, None, "A1_inv")
}

/// A2⁻¹ = F_c† (δ̂²/η̂²) F_c by a diagonal dilation conjugated with F_c.
pub fn build_a_inv_encoding(spec: &GridSpec) -> Result<BlockEncoding> {
    let inv: Vec<C64> =
        grid::eta_hat_diag(spec.n_eta).into_iter().map(|e| c(spec.delta_eta_hat.powi(2) / (e * e))).collect();
    let m = CMat::from_diagonal(&nalgebra::DVector::from_column_slice(&inv));
    let be = BlockEncoding::dilation(&m, None, "A2_inv")?;
    Ok(be.conjugate(&grid::build_centered_dft(spec.n_eta), "A_inv"))
}

/// B = C_time ⊗ A1⁻¹ + I ⊗ A1⁻¹ C_η2 on the full (τ ⊗ η) register.
pub fn build_b_encoding(spec: &GridSpec, params: &MarketParams) -> Result<BlockEncoding> {
    let a1 = build_a1_inv_encoding(spec, params)?;
    let first = be_kron(&build_time_encoding(spec)?, &a1)?;
    let second = be_product(&a1, &build_c_eta2_encoding(spec, params)?)?.lift(0, spec.n_eta + spec.n_tau1);
    let mut b = be_lincomb(c(1.0), &first, c(1.0), &second)?;
    b.label = "B".into();
    Ok(b)
}

/// Serializable description of one encoding, with the deviation of its
/// projected block from the classical operator when that is small enough to form.
#[derive(Clone, Debug, Serialize)]
pub struct EncodingSummary {
    pub label: String,
    pub n_sys: u32,
    pub n_anc: u32,
    pub alpha: f64,
    pub err: f64,
    pub gates: usize,
    pub projection_error: Option<f64>,
}

impl EncodingSummary {
    pub fn new(be: &BlockEncoding, reference: Option<CMat>) -> Self {
        Self {
            label: be.label.clone(),
            n_sys: be.n_sys,
            n_anc: be.n_anc,
            alpha: be.alpha,
            err: be.err,
            gates: be.op.gate_count(),
            projection_error: reference.map(|r| max_abs_diff(&be.projected(), &r)),
        }
    }
}

/// Every factor encoding of the system, in assembly order: C_τ1, C_time,
/// D_η1, D_η2, C_η2, A1⁻¹, A2⁻¹, B.
pub fn factor_encodings(spec: &GridSpec, params: &MarketParams) -> Result<Vec<BlockEncoding>> {
    Ok(vec![
        build_ctau1_encoding(spec)?,
        build_time_encoding(spec)?,
        encode_spectral(spec)?,
        build_d_eta2_encoding(spec, params)?,
        build_c_eta2_encoding(spec, params)?,
        build_a1_inv_encoding(spec, params)?,
        build_a_inv_encoding(spec)?,
        build_b_encoding(spec, params)?,
    ])
}

/// Summaries of [`factor_encodings`]. Projection checks run only where the
/// system register has at most `cap` rows; B has no separate classical form.
pub fn describe_encodings(spec: &GridSpec, params: &MarketParams, cap: usize) -> Result<Vec<EncodingSummary>> {
    let diag = |v: Vec<C64>| CMat::from_diagonal(&nalgebra::DVector::from_vec(v));
    let reference = |i: usize| -> Option<CMat> {
        Some(match i {
            0 => real_to_complex(&grid::build_time_derivative(spec)),
            1 => grid::time_operator(spec),
            2 => grid::fourier_conjugate(spec.n_eta, &grid::eta_hat_diag(spec.n_eta)),
            3 => diag(grid::drift_diagonal(spec, params)),
            4 => grid::build_c_eta2(spec, params),
            5 => diag(grid::build_a1(spec, params).iter().map(|v| c(1.0 / v)).collect()),
            6 => grid::build_a2(spec).try_inverse().expect("A2 is invertible"),
            _ => return None,
        })
    };
    Ok(factor_encodings(spec, params)?
        .iter()
        .enumerate()
        .map(|(i, be)| EncodingSummary::new(be, if (1usize << be.n_sys) <= cap { reference(i) } else { None }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_time_derivative, TimeClosure};
    use crate::linalg::{max_abs, max_abs_diff, spectral_norm};

    fn params() -> MarketParams {
        MarketParams::default()
    }

    fn spec(n_eta: u32, n_tau1: u32) -> GridSpec {
        GridSpec::with_sizes(&params(), n_eta, n_tau1)
    }

    #[test]
    fn ctau1_lcu_matches_grid_matrix() {
        for n in 1..=4 {
            let g = spec(2, n);
            let be = build_ctau1_encoding(&g).unwrap();
            let want = real_to_complex(&build_time_derivative(&g));
            let got = be.projected();
            assert!(max_abs_diff(&got, &want) < 1e-12, "n_tau1 = {n}");
            assert_eq!(be.n_anc, 2);
            assert!((be.alpha - 1.5 / g.delta_tau1).abs() < 1e-12);
            if n >= 2 {
                let last = (1 << n) - 1;
                assert!(got[(0, last)].norm() < 1e-15);
                assert!(got[(last, 0)].norm() < 1e-15);
            }
        }
    }

    #[test]
    fn periodic_variant_has_wrap_corners() {
        let g = spec(2, 3);
        let be = build_ctau1_periodic_encoding(&g).unwrap();
        let m = be.projected();
        let d = g.t_final / 8.0;
        assert!((m[(0, 7)] - c(-0.5 / d)).norm() < 1e-12);
        assert!((m[(7, 0)] - c(0.5 / d)).norm() < 1e-12);
        assert!((m[(0, 1)] - c(0.5 / d)).norm() < 1e-12);
    }

    #[test]
    fn time_encoding_includes_closure() {
        for closure in [TimeClosure::Outflow, TimeClosure::Mirror] {
            let g = spec(2, 2).closure(closure);
            let be = build_time_encoding(&g).unwrap();
            assert!(max_abs_diff(&be.projected(), &grid::time_operator(&g)) < 1e-12);
        }
    }

    #[test]
    fn diagonal_encoding_of_eta_hat() {
        let g = spec(1, 1);
        let (d, _) = grid::build_eta_operator(&g);
        let terms = pauli_expansion(&d.iter().map(|&v| c(v)).collect::<Vec<_>>());
        assert_eq!(terms, vec![(1, c(-0.5))]);
        let m = real_to_complex(&nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d)));
        let be = encode_diagonal(&m, 1).unwrap();
        assert!((be.alpha - 0.5).abs() < 1e-15);
        assert!(max_abs_diff(&be.projected(), &m) < 1e-14);
    }

    #[test]
    fn diagonal_encoding_of_identity() {
        let be = encode_diagonal(&CMat::identity(8, 8), 3).unwrap();
        assert_eq!(be.n_anc, 0);
        assert_eq!(be.alpha, 1.0);
        assert!(max_abs_diff(&be.projected(), &CMat::identity(8, 8)) < 1e-15);
    }

    #[test]
    fn diagonal_encoding_rejects_dense_input() {
        let mut m = CMat::identity(4, 4);
        m[(0, 1)] = c(0.1);
        assert!(encode_diagonal(&m, 2).is_err());
    }

    #[test]
    fn drift_encoding_alpha_and_projection() {
        let p = params();
        let g = crate::grid::make_grid(&p, 3, 1e-3, &Default::default()).unwrap();
        let be = build_d_eta2_encoding(&g, &p).unwrap();
        let d = grid::drift_diagonal(&g, &p);
        let m = CMat::from_diagonal(&nalgebra::DVector::from_column_slice(&d));
        assert!(max_abs_diff(&be.projected(), &m) < 1e-12);
        let constant = d.iter().sum::<C64>().norm() / d.len() as f64;
        let max_d = d.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(be.alpha <= max_d + constant + 1e-12);
        assert_eq!(be.n_anc, 2); // ⌈log₂(3 + 1)⌉
    }

    #[test]
    fn spectral_encoding_matches_derivative() {
        for n in [2, 3] {
            let g = spec(n, 1);
            let be = encode_spectral(&g).unwrap();
            let deriv = grid::build_spectral_derivative(&g);
            let scale = I * (std::f64::consts::PI / (g.delta_eta_hat * g.eta_max));
            assert!(max_abs_diff(&(be.projected() * scale), &deriv) < 1e-12);
            let diag = encode_diagonal(
                &real_to_complex(&nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(grid::eta_hat_diag(
                    n,
                )))),
                n,
            )
            .unwrap();
            assert_eq!(be.alpha, diag.alpha);
            assert_eq!(be.n_anc, (n + 1).next_power_of_two().trailing_zeros());
        }
    }

    #[test]
    fn inverse_factor_encodings() {
        let p = params();
        let g = spec(3, 1);
        let a1 = build_a1_inv_encoding(&g, &p).unwrap();
        let want: Vec<C64> = grid::build_a1(&g, &p).iter().map(|v| c(1.0 / v)).collect();
        let wm = CMat::from_diagonal(&nalgebra::DVector::from_vec(want));
        assert!(max_abs_diff(&a1.projected(), &wm) < 1e-10 * max_abs(&wm));
        assert_eq!(a1.n_anc, 1);
        let ai = build_a_inv_encoding(&g).unwrap();
        let prod = ai.projected() * grid::build_a2(&g);
        assert!(max_abs_diff(&prod, &CMat::identity(8, 8)) < 1e-12);
        assert!((ai.alpha - spectral_norm(&ai.projected())).abs() < 1e-12);
    }

    #[test]
    fn b_encoding_matches_grid_splitting() {
        let p = params();
        for closure in [TimeClosure::Outflow, TimeClosure::Mirror] {
            let g = spec(2, 2).closure(closure);
            let be = build_b_encoding(&g, &p).unwrap();
            let sys = grid::assemble_system(&g, &p, 1 << 12).unwrap();
            let err = max_abs_diff(&be.projected(), &sys.b);
            assert!(err < 1e-10 * max_abs(&sys.b).max(1.0), "err {err}");
        }
    }

    #[test]
    fn alpha_composition_rules() {
        let p = params();
        let g = spec(2, 2);
        let t = build_time_encoding(&g).unwrap();
        let a1 = build_a1_inv_encoding(&g, &p).unwrap();
        let k = be_kron(&t, &a1).unwrap();
        assert!((k.alpha - t.alpha * a1.alpha).abs() < 1e-12 * k.alpha);
        let e2 = build_c_eta2_encoding(&g, &p).unwrap();
        let l = be_lincomb(c(2.0), &e2, C64::new(0.0, -1.0), &e2).unwrap();
        assert!((l.alpha - 3.0 * e2.alpha).abs() < 1e-12);
    }

    #[test]
    fn composed_encodings_within_err_bound() {
        let p = params();
        let g = spec(2, 2);
        let e2 = build_c_eta2_encoding(&g, &p).unwrap();
        let want = grid::build_c_eta2(&g, &p);
        let err = spectral_norm(&(e2.projected() - &want));
        assert!(err <= e2.err + 1e-12 * e2.alpha);
    }

    #[test]
    fn encoding_summaries_match_operators() {
        let g = spec(3, 2);
        let all = describe_encodings(&g, &params(), 1 << 6).unwrap();
        assert_eq!(all.len(), 8);
        for e in &all {
            if let Some(d) = e.projection_error {
                assert!(d < 1e-9, "{}: {d}", e.label);
            }
            assert!(e.gates > 0 || e.n_anc == 0, "{}", e.label);
        }
        assert!(all.iter().filter(|e| e.projection_error.is_some()).count() == 7);
    }
}
