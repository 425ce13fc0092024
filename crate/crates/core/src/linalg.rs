//! Dense helpers and Kronecker-structured operators shared by all modules.
//!
//! Vectors over a `time ⊗ space` product are laid out time-major: index
//! `t * n_space + x`. Reshaped column-major as an `n_space × n_time` matrix `X`,
//! the action of `L ⊗ R` is `R · X · Lᵀ`, which is what every matrix-free path uses.

use nalgebra::{DMatrix, DVector, Dyn, Schur, LU};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const ZERO: C64 = C64::new(0.0, 0.0);

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn real_to_complex(m: &DMatrix<f64>) -> CMat {
    m.map(c)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn diag(d: &[C64]) -> CMat {
    CMat::from_diagonal(&CVec::from_column_slice(d))
}

/// Largest singular value.
pub fn spectral_norm(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_number(m: &CMat) -> f64 {
    let sv = m.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Largest absolute entry of `a − b`.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Dense inverse via LU; errors on a numerically singular matrix.
pub fn inverse(m: &CMat) -> Result<CMat> {
    m.clone().try_inverse().ok_or_else(|| Error::Singular("matrix inverse failed".into()))
}

/// Operator norm of the inverse, i.e. `1/σ_min`.
pub fn inverse_norm(m: &CMat) -> f64 {
    let sv = m.singular_values();
    1.0 / sv.min()
}

/// Sum of Kronecker products `Σ_k L_k ⊗ R_k`, applied without materialization.
#[derive(Clone, Debug)]
pub struct KronSum {
    pub n_time: usize,
    pub n_space: usize,
    pub terms: Vec<(CMat, CMat)>,
}

impl KronSum {
    pub fn new(n_time: usize, n_space: usize) -> Self {
        Self { n_time, n_space, terms: Vec::new() }
    }

    pub fn with(mut self, left: CMat, right: CMat) -> Self {
        assert_eq!(left.shape(), (self.n_time, self.n_time));
        assert_eq!(right.shape(), (self.n_space, self.n_space));
        self.terms.push((left, right));
        self
    }

    pub fn dim(&self) -> usize {
        self.n_time * self.n_space
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.dim());
        let xm = CMat::from_column_slice(self.n_space, self.n_time, x);
        let mut out = CMat::zeros(self.n_space, self.n_time);
        for (l, r) in &self.terms {
            out += r * &xm * l.transpose();
        }
        out.as_slice().to_vec()
    }

    pub fn adjoint(&self) -> KronSum {
        KronSum {
            n_time: self.n_time,
            n_space: self.n_space,
            terms: self.terms.iter().map(|(l, r)| (l.adjoint(), r.adjoint())).collect(),
        }
    }

    pub fn to_dense(&self, cap: usize) -> Result<CMat> {
        let dim = self.dim();
        if dim > cap {
            return Err(Error::DimensionCap { dim, cap });
        }
        let mut m = CMat::zeros(dim, dim);
        for (l, r) in &self.terms {
            m += kron(l, r);
        }
        Ok(m)
    }
}

/// Direct solver for `I ⊗ X + C ⊗ Y` via a complex Schur form of `C`.
///
/// With `C = Q T Q†` the system becomes block upper triangular and is solved by
/// back-substitution over time blocks, each block an `n_space` dense LU.
pub struct KronSylvester {
    q: CMat,
    t: CMat,
    y: CMat,
    blocks: Vec<LU<C64, Dyn, Dyn>>,
}

impl KronSylvester {
    pub fn new(c: &CMat, x: &CMat, y: &CMat) -> Result<Self> {
        let schur = Schur::try_new(c.clone(), 1e-15, 10_000)
            .ok_or_else(|| Error::NoConvergence("Schur decomposition of time factor".into()))?;
        let (q, t) = schur.unpack();
        let mut blocks = Vec::with_capacity(t.nrows());
        for k in 0..t.nrows() {
            let m = x + y * t[(k, k)];
            let lu = m.lu();
            if !lu.is_invertible() {
                return Err(Error::Singular(format!("time block {k} is singular")));
            }
            blocks.push(lu);
        }
        Ok(Self { q, t, y: y.clone(), blocks })
    }

    /// Recognizes `I ⊗ X + C ⊗ Y` (identity time factor first) in a two-term sum.
    pub fn from_kron_sum(op: &KronSum) -> Result<Self> {
        let id = CMat::identity(op.n_time, op.n_time);
        match op.terms.as_slice() {
            [(l0, x), (c, y)] if max_abs_diff(l0, &id) == 0.0 => Self::new(c, x, y),
            [(c, y), (l1, x)] if max_abs_diff(l1, &id) == 0.0 => Self::new(c, x, y),
            _ => Err(Error::Invalid("operator is not of the form I⊗X + C⊗Y".into())),
        }
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let nt = self.t.nrows();
        let ns = self.y.nrows();
        let bm = CMat::from_column_slice(ns, nt, b);
        let r = &bm * self.q.map(|z| z.conj());
        let mut z = CMat::zeros(ns, nt);
        let mut yz = CMat::zeros(ns, nt);
        for k in (0..nt).rev() {
            let mut rhs = r.column(k).into_owned();
            for l in (k + 1)..nt {
                let tkl = self.t[(k, l)];
                if tkl != ZERO {
                    rhs -= yz.column(l) * tkl;
                }
            }
            let zk = self.blocks[k].solve(&rhs).expect("invertible block");
            yz.set_column(k, &(&self.y * &zk));
            z.set_column(k, &zk);
        }
        let x = z * self.q.transpose();
        x.as_slice().to_vec()
    }
}

/// Restarted GMRES for a matrix-free operator. Returns the solution and the
/// number of inner iterations used.
pub fn gmres<F>(
    apply: F,
    b: &[C64],
    x0: Option<&[C64]>,
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<(Vec<C64>, usize)>
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    let n = b.len();
    let bnorm = vec_norm(b);
    let mut x: Vec<C64> = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; n]);
    if bnorm == 0.0 {
        return Ok((vec![ZERO; n], 0));
    }
    let mut total = 0;
    loop {
        let ax = apply(&x);
        let r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = vec_norm(&r);
        if beta / bnorm < tol {
            return Ok((x, total));
        }
        if total >= max_iter {
            return Err(Error::NoConvergence(format!("GMRES residual {:.3e} after {total} iterations", beta / bnorm)));
        }
        let m = restart.min(max_iter - total).max(1);
        let mut v: Vec<Vec<C64>> = vec![r.iter().map(|z| z / beta).collect()];
        let mut h = vec![vec![ZERO; m]; m + 1];
        let mut cs = vec![ZERO; m];
        let mut sn = vec![ZERO; m];
        let mut g = vec![ZERO; m + 1];
        g[0] = c(beta);
        let mut k_used = 0;
        for k in 0..m {
            let mut w = apply(&v[k]);
            for (j, vj) in v.iter().enumerate() {
                let hij: C64 = vj.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                h[j][k] = hij;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= hij * vi;
                }
            }
            let hn = vec_norm(&w);
            h[k + 1][k] = c(hn);
            for j in 0..k {
                let t = cs[j].conj() * h[j][k] + sn[j].conj() * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k].norm_sqr() + h[k + 1][k].norm_sqr()).sqrt();
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = c(denom);
            h[k + 1][k] = ZERO;
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k].conj() * g[k];
            k_used = k + 1;
            total += 1;
            if g[k + 1].norm() / bnorm < tol * 0.5 || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|z| z / hn).collect());
        }
        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in (i + 1)..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&v[j]) {
                *xi += yj * vi;
            }
        }
    }
}

/// Power-iteration estimate of `‖M‖₂` from the actions of `M` and `M†`.
/// The result is a lower bound that converges from below.
pub fn norm_estimate<F, G>(apply: F, apply_adj: G, dim: usize, iters: usize, seed: u64) -> f64
where
    F: Fn(&[C64]) -> Vec<C64>,
    G: Fn(&[C64]) -> Vec<C64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<C64> = (0..dim).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
    let n0 = vec_norm(&x);
    x.iter_mut().for_each(|z| *z /= n0);
    let mut est = 0.0;
    for _ in 0..iters {
        let y = apply(&x);
        let ny = vec_norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let z = apply_adj(&y);
        let nz = vec_norm(&z);
        let next = (nz).sqrt();
        x = z.into_iter().map(|v| v / nz).collect();
        if (next - est).abs() <= 1e-12 * next {
            return next.max(ny);
        }
        est = next.max(ny);
    }
    est
}
