//! Finite-horizon linear-quadratic control with singular control weights.
//!
//! The pipeline: integrate the Riccati equation, classify the problem as
//! regular or irregular, pick a terminal modification that makes the
//! modified cost regular, synthesize the feedback plus a minimum-energy
//! steering input, then simulate and verify against independent oracles.

pub mod det_synth;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod oracle;
pub mod problem;
pub mod regularity;
pub mod riccati;
pub mod steering;
pub mod stoch_synth;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use problem::{CoefficientFn, LqProblem, ProblemKind, SimulationTrace, TimeGrid};

/// Numerical tolerances shared across the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative singular-value cutoff for pseudoinverses and rank decisions.
    pub rank: f64,
    /// Threshold for residual-based checks.
    pub residual: f64,
    /// Entry magnitude treated as finite escape during integration.
    pub escape_bound: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank: linalg::DEFAULT_RANK_TOL,
            residual: 1e-6,
            escape_bound: 1e12,
        }
    }
}
