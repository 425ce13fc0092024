//! Block-encodings and their algebra.
//!
//! An encoding of `A` on `n_sys` system qubits is a unitary circuit on
//! `n_sys + n_anc` qubits with the ancillas above the system register, such that
//! `α (⟨0|^a ⊗ I) U (|0⟩^a ⊗ I) ≈ A` within `err`.

use super::op::{pauli_x, prepare_unitary, rotation_y, Op};
use super::state::StateVector;
use crate::error::{Error, Result};
use crate::linalg::{c, spectral_norm, CMat, CVec, C64, ONE, ZERO};

#[derive(Clone, Debug)]
pub struct BlockEncoding {
    pub op: Op,
    pub n_sys: u32,
    pub n_anc: u32,
    pub alpha: f64,
    pub err: f64,
    pub label: String,
}

impl BlockEncoding {
    pub fn n_total(&self) -> u32 {
        self.n_sys + self.n_anc
    }

    /// Full unitary; refused above `cap` rows.
    pub fn unitary(&self, cap: usize) -> Result<CMat> {
        let dim = 1usize << self.n_total();
        if dim > cap {
            return Err(Error::DimensionCap { dim, cap });
        }
        Ok(self.op.to_matrix(self.n_total()))
    }

    /// `α (⟨0| ⊗ I) U (|0⟩ ⊗ I)`: the operator actually encoded.
    pub fn projected(&self) -> CMat {
        let ns = 1usize << self.n_sys;
        let total = 1usize << self.n_total();
        let mut m = CMat::zeros(ns, ns);
        let mut buf = vec![ZERO; total];
        for j in 0..ns {
            buf.iter_mut().for_each(|z| *z = ZERO);
            buf[j] = ONE;
            self.op.apply(&mut buf);
            for i in 0..ns {
                m[(i, j)] = buf[i] * self.alpha;
            }
        }
        m
    }

    /// Exact unitary as a trivial encoding (α = 1, no ancillas).
    pub fn from_unitary(u: CMat, label: &str) -> Self {
        let n = u.nrows().trailing_zeros();
        let qubits = (0..n).collect();
        Self { op: Op::gate(qubits, u), n_sys: n, n_anc: 0, alpha: 1.0, err: 0.0, label: label.into() }
    }

    pub fn identity(n_sys: u32) -> Self {
        Self { op: Op::identity(), n_sys, n_anc: 0, alpha: 1.0, err: 0.0, label: "I".into() }
    }

    /// Encoding of the zero operator: one ancilla flipped away from |0⟩.
    pub fn zero(n_sys: u32) -> Self {
        Self { op: Op::gate(vec![n_sys], pauli_x()), n_sys, n_anc: 1, alpha: 1.0, err: 0.0, label: "0".into() }
    }

    /// One-ancilla unitary dilation of `k/α`, α defaulting to ‖k‖₂:
    /// `[[K, √(I−KK†)], [√(I−K†K), −K†]]`.
    pub fn dilation(k: &CMat, alpha: Option<f64>, label: &str) -> Result<Self> {
        let n = k.nrows();
        if !n.is_power_of_two() || k.ncols() != n {
            return Err(Error::DimensionMismatch("dilation needs a square 2^n matrix".into()));
        }
        let norm = spectral_norm(k);
        let alpha = alpha.unwrap_or(norm);
        if alpha < norm * (1.0 - 1e-12) {
            return Err(Error::Invalid(format!("α = {alpha} below ‖K‖ = {norm}")));
        }
        if alpha == 0.0 {
            let mut z = Self::zero(n.trailing_zeros());
            z.label = label.into();
            return Ok(z);
        }
        let kh = k / c(alpha);
        // K = U Σ V†: √(I−KK†) = U√(1−Σ²)U†, √(I−K†K) = V√(1−Σ²)V†
        let svd = kh.clone().svd(true, true);
        let (uu, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let comp = CVec::from_iterator(n, svd.singular_values.iter().map(|&s| c((1.0 - (s * s).min(1.0)).sqrt())));
        let cd = CMat::from_diagonal(&comp);
        let top = &uu * &cd * uu.adjoint();
        let bottom = vt.adjoint() * &cd * &vt;
        let mut u = CMat::zeros(2 * n, 2 * n);
        u.view_mut((0, 0), (n, n)).copy_from(&kh);
        u.view_mut((0, n), (n, n)).copy_from(&top);
        u.view_mut((n, 0), (n, n)).copy_from(&bottom);
        u.view_mut((n, n), (n, n)).copy_from(&(-kh.adjoint()));
        let n_sys = n.trailing_zeros();
        Ok(Self { op: Op::gate((0..=n_sys).collect(), u), n_sys, n_anc: 1, alpha, err: 0.0, label: label.into() })
    }

    /// Linear combination of unitaries Σ c_i U_i via PREP† · SELECT · PREP.
    pub fn lcu(coeffs: &[C64], unitaries: &[Op], n_sys: u32, label: &str) -> Result<Self> {
        if coeffs.len() != unitaries.len() || coeffs.is_empty() {
            return Err(Error::DimensionMismatch("one coefficient per unitary".into()));
        }
        let alpha: f64 = coeffs.iter().map(|z| z.norm()).sum();
        if alpha == 0.0 {
            let mut z = Self::zero(n_sys);
            z.label = label.into();
            return Ok(z);
        }
        if coeffs.len() == 1 {
            let phase = coeffs[0] / coeffs[0].norm();
            return Ok(Self {
                op: Op::Seq(vec![unitaries[0].clone(), Op::Phase(phase)]),
                n_sys,
                n_anc: 0,
                alpha,
                err: 0.0,
                label: label.into(),
            });
        }
        let n_anc = (coeffs.len() as u64).next_power_of_two().trailing_zeros();
        let size = 1usize << n_anc;
        let mut amps = vec![0.0; size];
        for (a, z) in amps.iter_mut().zip(coeffs) {
            *a = (z.norm() / alpha).sqrt();
        }
        let anc: Vec<u32> = (n_sys..n_sys + n_anc).collect();
        let prep = prepare_unitary(&amps);
        let mut ops = vec![Op::gate(anc.clone(), prep.clone())];
        for (i, (z, u)) in coeffs.iter().zip(unitaries).enumerate() {
            if z.norm() == 0.0 {
                continue;
            }
            let controls = anc.iter().enumerate().map(|(b, &q)| (q, (i >> b) & 1 == 1)).collect();
            let phase = z / z.norm();
            ops.push(Op::controlled(controls, Op::Seq(vec![u.clone(), Op::Phase(phase)])));
        }
        ops.push(Op::gate(anc, prep.adjoint()));
        Ok(Self { op: Op::Seq(ops), n_sys, n_anc, alpha, err: 0.0, label: label.into() })
    }

    /// Encoding of `s·A`: α scales by |s|, the phase rides on the unitary.
    pub fn scale(mut self, s: C64) -> Self {
        let m = s.norm();
        if m == 0.0 {
            return Self::zero(self.n_sys);
        }
        self.op = Op::Seq(vec![self.op, Op::Phase(s / m)]);
        self.alpha *= m;
        self.err *= m;
        self
    }

    /// Conjugation `V† A V` by an exact unitary on the system register.
    pub fn conjugate(mut self, v: &CMat, label: &str) -> Self {
        let sys: Vec<u32> = (0..self.n_sys).collect();
        self.op = Op::Seq(vec![Op::gate(sys.clone(), v.clone()), self.op, Op::gate(sys, v.adjoint())]);
        self.label = label.into();
        self
    }

    /// Moves ancillas so they start at `anc_start`, and the system register so
    /// it starts at `sys_offset`.
    fn remap(&self, sys_offset: u32, anc_start: u32) -> Op {
        let ns = self.n_sys;
        self.op.relabel(&move |q| if q < ns { q + sys_offset } else { q - ns + anc_start })
    }

    /// Embeds into a larger system: this encoding acts on system qubits
    /// `sys_offset .. sys_offset + n_sys` of an `n_sys_total`-qubit register.
    pub fn lift(&self, sys_offset: u32, n_sys_total: u32) -> Self {
        assert!(sys_offset + self.n_sys <= n_sys_total);
        Self {
            op: self.remap(sys_offset, n_sys_total),
            n_sys: n_sys_total,
            n_anc: self.n_anc,
            alpha: self.alpha,
            err: self.err,
            label: self.label.clone(),
        }
    }
}

/// Product `A·B` of encodings (A from `u`, B from `v`):
/// an (αβ, a+b, αε+βδ)-encoding with v's ancillas stacked above u's.
pub fn be_product(u: &BlockEncoding, v: &BlockEncoding) -> Result<BlockEncoding> {
    if u.n_sys != v.n_sys {
        return Err(Error::DimensionMismatch(format!("product of {}- and {}-qubit encodings", u.n_sys, v.n_sys)));
    }
    let n = u.n_sys;
    let v_op = v.remap(0, n + u.n_anc);
    Ok(BlockEncoding {
        op: Op::Seq(vec![v_op, u.op.clone()]),
        n_sys: n,
        n_anc: u.n_anc + v.n_anc,
        alpha: u.alpha * v.alpha,
        err: u.alpha * v.err + v.alpha * u.err,
        label: format!("({})·({})", u.label, v.label),
    })
}

/// `d1·A + d2·B` via one prepare/select control qubit on top of both ancilla sets:
/// a (|d1|α + |d2|β, a+b+1, |d1|δ + |d2|ε)-encoding.
pub fn be_lincomb(d1: C64, u: &BlockEncoding, d2: C64, v: &BlockEncoding) -> Result<BlockEncoding> {
    if u.n_sys != v.n_sys {
        return Err(Error::DimensionMismatch(format!("combination of {}- and {}-qubit encodings", u.n_sys, v.n_sys)));
    }
    let n = u.n_sys;
    let ctrl = n + u.n_anc + v.n_anc;
    let w1 = d1 * u.alpha;
    let w2 = d2 * v.alpha;
    let lam = w1.norm() + w2.norm();
    let alpha = d1.norm() * u.alpha + d2.norm() * v.alpha;
    let err = d1.norm() * u.err + d2.norm() * v.err;
    let label = format!("{}·({}) + {}·({})", fmt_c(d1), u.label, fmt_c(d2), v.label);
    if lam == 0.0 {
        let mut z = BlockEncoding::zero(n);
        z.n_anc = u.n_anc + v.n_anc + 1;
        z.op = Op::gate(vec![ctrl], pauli_x());
        z.label = label;
        return Ok(z);
    }
    let theta = (w2.norm() / lam).sqrt().asin();
    let prep = rotation_y(theta);
    let phase = |w: C64| if w.norm() > 0.0 { w / w.norm() } else { ONE };
    let u_op = Op::Seq(vec![u.op.clone(), Op::Phase(phase(w1))]);
    let v_op = Op::Seq(vec![v.remap(0, n + u.n_anc), Op::Phase(phase(w2))]);
    let op = Op::Seq(vec![
        Op::gate(vec![ctrl], prep.clone()),
        Op::controlled(vec![(ctrl, false)], u_op),
        Op::controlled(vec![(ctrl, true)], v_op),
        Op::gate(vec![ctrl], prep.adjoint()),
    ]);
    Ok(BlockEncoding { op, n_sys: n, n_anc: u.n_anc + v.n_anc + 1, alpha, err, label })
}

/// Encoding of `L ⊗ R` where `left` acts on the high (time) register and
/// `right` on the low (space) register.
pub fn be_kron(left: &BlockEncoding, right: &BlockEncoding) -> Result<BlockEncoding> {
    let total = left.n_sys + right.n_sys;
    let l = left.lift(right.n_sys, total);
    let r = right.lift(0, total);
    let mut p = be_product(&l, &r)?;
    p.label = format!("({})⊗({})", left.label, right.label);
    Ok(p)
}

fn fmt_c(z: C64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else {
        format!("({}{:+}i)", z.re, z.im)
    }
}

/// Result of running an encoding on a state and post-selecting the ancillas on |0⟩.
#[derive(Clone, Debug)]
pub struct ApplyOutcome {
    /// Normalized `(A/α)|ψ⟩`; `None` when the success probability is zero.
    pub state: Option<StateVector>,
    pub success_prob: f64,
    /// Success probability fell below the configured floor.
    pub starved: bool,
}

/// Simulates the encoding on `state` (system register only) and post-selects.
pub fn be_apply(be: &BlockEncoding, state: &StateVector, floor: f64) -> Result<ApplyOutcome> {
    if state.n_qubits() != be.n_sys {
        return Err(Error::DimensionMismatch(format!(
            "{}-qubit state for {}-qubit encoding",
            state.n_qubits(),
            be.n_sys
        )));
    }
    let ns = 1usize << be.n_sys;
    let mut buf = vec![ZERO; 1usize << be.n_total()];
    buf[..ns].copy_from_slice(&state.amplitudes);
    be.op.apply(&mut buf);
    buf.truncate(ns);
    let p: f64 = buf.iter().map(|a| a.norm_sqr()).sum();
    let starved = p < floor;
    let out = if p > 0.0 {
        let s = p.sqrt();
        let amps = buf.into_iter().map(|a| a / s).collect();
        Some(StateVector { amplitudes: amps, layout: state.layout.clone() })
    } else {
        None
    };
    Ok(ApplyOutcome { state: out, success_prob: p, starved })
}
