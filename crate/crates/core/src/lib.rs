//! Classically simulated quantum-preconditioned solver for the Asian-option
//! Black-Scholes PDE.
//!
//! The pipeline discretizes the reduced PDE ([`grid`]), builds block-encodings of
//! its factors ([`circuits`]), inverts the fast-forwardable factors and forms the
//! preconditioned system ([`inversion`]), recovers ψ(η, τ₁) from the solution
//! state through probability integrals and mock-Chebyshev interpolation
//! ([`extraction`]), and checks everything against classical references
//! ([`oracle`]). [`pipeline`] wires the stages together.

pub mod circuits;
pub mod error;
pub mod extraction;
pub mod grid;
pub mod inversion;
pub mod linalg;
pub mod oracle;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};
pub use params::{MarketParams, OptionKind};
