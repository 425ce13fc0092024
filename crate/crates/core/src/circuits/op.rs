//! Gate-level operations on a full statevector.
//!
//! Qubit `q` is bit `q` of the basis index. A multi-qubit gate lists its qubits
//! least-significant first, matching the gate matrix's own index bits.

use crate::linalg::{CMat, CVec, C64, ONE, ZERO};

/// A unitary circuit fragment.
#[derive(Clone, Debug)]
pub enum Op {
    /// Dense gate on the listed qubits.
    Gate { qubits: Vec<u32>, matrix: CMat },
    /// Modular addition |x⟩ → |x + amount mod 2^k⟩ on the listed register.
    Shift { qubits: Vec<u32>, amount: i64 },
    /// Target applied only where every control qubit has the given value.
    Controlled { controls: Vec<(u32, bool)>, target: Box<Op> },
    /// Global scalar of unit modulus.
    Phase(C64),
    /// Applied left to right.
    Seq(Vec<Op>),
}

impl Op {
    pub fn gate(qubits: Vec<u32>, matrix: CMat) -> Op {
        assert_eq!(matrix.nrows(), 1 << qubits.len(), "gate size does not match qubit list");
        Op::Gate { qubits, matrix }
    }

    pub fn identity() -> Op {
        Op::Seq(Vec::new())
    }

    pub fn controlled(controls: Vec<(u32, bool)>, target: Op) -> Op {
        if controls.is_empty() {
            target
        } else {
            Op::Controlled { controls, target: Box::new(target) }
        }
    }

    /// Adjoint fragment.
    pub fn adjoint(&self) -> Op {
        match self {
            Op::Gate { qubits, matrix } => Op::Gate { qubits: qubits.clone(), matrix: matrix.adjoint() },
            Op::Shift { qubits, amount } => Op::Shift { qubits: qubits.clone(), amount: -amount },
            Op::Controlled { controls, target } => {
                Op::Controlled { controls: controls.clone(), target: Box::new(target.adjoint()) }
            }
            Op::Phase(p) => Op::Phase(p.conj()),
            Op::Seq(ops) => Op::Seq(ops.iter().rev().map(Op::adjoint).collect()),
        }
    }

    /// Renames every qubit through `f`.
    pub fn relabel(&self, f: &dyn Fn(u32) -> u32) -> Op {
        match self {
            Op::Gate { qubits, matrix } => {
                Op::Gate { qubits: qubits.iter().map(|&q| f(q)).collect(), matrix: matrix.clone() }
            }
            Op::Shift { qubits, amount } => {
                Op::Shift { qubits: qubits.iter().map(|&q| f(q)).collect(), amount: *amount }
            }
            Op::Controlled { controls, target } => Op::Controlled {
                controls: controls.iter().map(|&(q, v)| (f(q), v)).collect(),
                target: Box::new(target.relabel(f)),
            },
            Op::Phase(p) => Op::Phase(*p),
            Op::Seq(ops) => Op::Seq(ops.iter().map(|o| o.relabel(f)).collect()),
        }
    }

    /// Highest qubit index touched, plus one.
    pub fn width(&self) -> u32 {
        match self {
            Op::Gate { qubits, .. } | Op::Shift { qubits, .. } => qubits.iter().map(|q| q + 1).max().unwrap_or(0),
            Op::Controlled { controls, target } => {
                controls.iter().map(|c| c.0 + 1).max().unwrap_or(0).max(target.width())
            }
            Op::Phase(_) => 0,
            Op::Seq(ops) => ops.iter().map(Op::width).max().unwrap_or(0),
        }
    }

    /// Applies the fragment in place to a state of `log2(amps.len())` qubits.
    pub fn apply(&self, amps: &mut [C64]) {
        assert!(amps.len().is_power_of_two());
        assert!((1usize << self.width()) <= amps.len(), "operation wider than state");
        self.apply_masked(amps, 0, 0);
    }

    fn apply_masked(&self, amps: &mut [C64], cmask: usize, cval: usize) {
        match self {
            Op::Gate { qubits, matrix } => {
                let k = qubits.len();
                let qmask: usize = qubits.iter().map(|&q| 1usize << q).sum();
                let offsets: Vec<usize> = (0..1usize << k).map(|b| spread(b, qubits)).collect();
                let mut buf = CVec::zeros(1 << k);
                for base in 0..amps.len() {
                    if base & qmask != 0 || base & cmask != cval {
                        continue;
                    }
                    for (i, &o) in offsets.iter().enumerate() {
                        buf[i] = amps[base | o];
                    }
                    let out = matrix * &buf;
                    for (i, &o) in offsets.iter().enumerate() {
                        amps[base | o] = out[i];
                    }
                }
            }
            Op::Shift { qubits, amount } => {
                let k = qubits.len();
                let size = 1usize << k;
                let w = amount.rem_euclid(size as i64) as usize;
                if w == 0 {
                    return;
                }
                let qmask: usize = qubits.iter().map(|&q| 1usize << q).sum();
                let offsets: Vec<usize> = (0..size).map(|b| spread(b, qubits)).collect();
                let mut buf = vec![ZERO; size];
                for base in 0..amps.len() {
                    if base & qmask != 0 || base & cmask != cval {
                        continue;
                    }
                    for (x, &o) in offsets.iter().enumerate() {
                        buf[(x + w) % size] = amps[base | o];
                    }
                    for (x, &o) in offsets.iter().enumerate() {
                        amps[base | o] = buf[x];
                    }
                }
            }
            Op::Controlled { controls, target } => {
                let mut m = cmask;
                let mut v = cval;
                for &(q, on) in controls {
                    m |= 1 << q;
                    if on {
                        v |= 1 << q;
                    }
                }
                target.apply_masked(amps, m, v);
            }
            Op::Phase(p) => {
                if *p == ONE {
                    return;
                }
                for (idx, a) in amps.iter_mut().enumerate() {
                    if idx & cmask == cval {
                        *a *= p;
                    }
                }
            }
            Op::Seq(ops) => {
                for op in ops {
                    op.apply_masked(amps, cmask, cval);
                }
            }
        }
    }

    /// Number of primitive gates and shifts, controls not expanded.
    pub fn gate_count(&self) -> usize {
        match self {
            Op::Gate { .. } | Op::Shift { .. } => 1,
            Op::Controlled { target, .. } => target.gate_count(),
            Op::Phase(_) => 0,
            Op::Seq(ops) => ops.iter().map(Op::gate_count).sum(),
        }
    }

    /// Dense matrix of the fragment on `n` qubits.
    pub fn to_matrix(&self, n: u32) -> CMat {
        let dim = 1usize << n;
        let mut m = CMat::zeros(dim, dim);
        let mut col = vec![ZERO; dim];
        for j in 0..dim {
            col.iter_mut().for_each(|z| *z = ZERO);
            col[j] = ONE;
            self.apply(&mut col);
            for (i, z) in col.iter().enumerate() {
                m[(i, j)] = *z;
            }
        }
        m
    }
}

/// Places the bits of `b` at the given qubit positions.
fn spread(b: usize, qubits: &[u32]) -> usize {
    qubits.iter().enumerate().fold(0, |acc, (i, &q)| acc | (((b >> i) & 1) << q))
}

/// Pauli X.
pub fn pauli_x() -> CMat {
    CMat::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

/// Pauli Y.
pub fn pauli_y() -> CMat {
    let i = C64::new(0.0, 1.0);
    CMat::from_row_slice(2, 2, &[ZERO, -i, i, ZERO])
}

/// Pauli Z.
pub fn pauli_z() -> CMat {
    CMat::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// Real rotation with first column (cos θ, sin θ).
pub fn rotation_y(theta: f64) -> CMat {
    let (s, c) = theta.sin_cos();
    CMat::from_row_slice(2, 2, &[C64::new(c, 0.0), C64::new(-s, 0.0), C64::new(s, 0.0), C64::new(c, 0.0)])
}

/// Unitary whose first column is the given real non-negative unit vector
/// (Householder reflection e₀ ↔ v).
pub fn prepare_unitary(amplitudes: &[f64]) -> CMat {
    let n = amplitudes.len();
    let mut w = CVec::from_iterator(n, amplitudes.iter().map(|&a| C64::new(a, 0.0)));
    w[0] -= ONE;
    let wn = w.norm_squared();
    let id = CMat::identity(n, n);
    if wn < 1e-30 {
        return id;
    }
    id - (&w * w.adjoint()) * C64::new(2.0 / wn, 0.0)
}

/// Permutation matrix of |x⟩ → |x + w mod 2^n⟩.
pub fn cyclic_shift(n: u32, w: i64) -> CMat {
    let size = 1usize << n;
    let s = w.rem_euclid(size as i64) as usize;
    let mut m = CMat::zeros(size, size);
    for x in 0..size {
        m[((x + s) % size, x)] = ONE;
    }
    m
}
