//! Statevector with named registers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{vec_norm, C64, ZERO};

/// Contiguous qubit span; registers are listed from the least-significant end.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub name: String,
    pub offset: u32,
    pub len: u32,
}

#[derive(Clone, Debug)]
pub struct StateVector {
    pub amplitudes: Vec<C64>,
    pub layout: Vec<Register>,
}

impl StateVector {
    /// Builds a state over registers given as (name, qubits), least significant first.
    pub fn new(amplitudes: Vec<C64>, registers: &[(&str, u32)]) -> Result<Self> {
        let mut layout = Vec::new();
        let mut offset = 0;
        for &(name, len) in registers {
            layout.push(Register { name: name.to_string(), offset, len });
            offset += len;
        }
        if amplitudes.len() != 1usize << offset {
            return Err(Error::DimensionMismatch(format!("{} amplitudes for {offset} qubits", amplitudes.len())));
        }
        Ok(Self { amplitudes, layout })
    }

    /// Single-register state.
    pub fn single(amplitudes: Vec<C64>, name: &str) -> Result<Self> {
        let n = amplitudes.len().trailing_zeros();
        Self::new(amplitudes, &[(name, n)])
    }

    pub fn n_qubits(&self) -> u32 {
        self.layout.iter().map(|r| r.len).sum()
    }

    pub fn norm(&self) -> f64 {
        vec_norm(&self.amplitudes)
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.amplitudes.iter_mut().for_each(|a| *a /= n);
        }
    }

    pub fn register(&self, name: &str) -> Result<&Register> {
        self.layout.iter().find(|r| r.name == name).ok_or_else(|| Error::Invalid(format!("no register named {name:?}")))
    }

    /// Cyclic shift |x⟩ → |x + w mod 2^len⟩ of one register, in O(2^n).
    pub fn shift_register(&mut self, name: &str, w: i64) -> Result<()> {
        let r = self.register(name)?.clone();
        let size = 1usize << r.len;
        let s = w.rem_euclid(size as i64) as usize;
        if s == 0 {
            return Ok(());
        }
        let mask = (size - 1) << r.offset;
        let total = 1usize << self.n_qubits();
        let old = std::mem::replace(&mut self.amplitudes, vec![ZERO; total]);
        for (idx, a) in old.into_iter().enumerate() {
            let x = (idx & mask) >> r.offset;
            let nx = (x + s) % size;
            self.amplitudes[(idx & !mask) | (nx << r.offset)] = a;
        }
        Ok(())
    }

    /// Probability that the top `m` qubits of each listed register read zero.
    pub fn prob_top_zero(&self, conditions: &[(&str, u32)]) -> Result<f64> {
        let mut mask = 0usize;
        for &(name, m) in conditions {
            let r = self.register(name)?;
            if m > r.len {
                return Err(Error::Invalid(format!("measuring {m} qubits of {}-qubit register", r.len)));
            }
            for q in (r.len - m)..r.len {
                mask |= 1 << (r.offset + q);
            }
        }
        Ok(self.amplitudes.iter().enumerate().filter(|(i, _)| i & mask == 0).map(|(_, a)| a.norm_sqr()).sum())
    }

    /// |amplitude|² per basis index.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }
}
