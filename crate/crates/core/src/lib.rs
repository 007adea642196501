//! Numerical toolkit for growth-fragmentation dynamics: cell division
//! (equal mitosis and smooth offspring), self-similar fragmentation and
//! age-structured renewal, discretized on a truncated size axis.
//!
//! The crate assembles the discrete generators, computes the principal
//! eigentriple (growth rate, profile, dual profile), time-steps the
//! semigroup to measure decay rates and entropy dissipation, and carries
//! a dense-matrix bench (`matrixlab`) that exercises the semigroup
//! machinery (exponentials, resolvents, spectral projectors, Duhamel
//! expansions) where everything can be checked against closed forms.

pub mod config;
pub mod evolution;
pub mod grid;
pub mod kernels;
pub mod matrixlab;
pub mod operators;
pub mod renewal;
pub mod report;
pub mod spectral;

pub use grid::{Grid, WeightSpec};
pub use kernels::{FragmentationModel, ModelKind, OffspringDist, TotalRate};
pub use operators::DiscreteOperator;
pub use spectral::Eigentriple;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),
    #[error("vector length {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("kernel: {0}")]
    Kernel(String),
    #[error("operator: {0}")]
    Operator(String),
    #[error("time step {dt} exceeds the monotonicity bound {max}")]
    CflViolation { dt: f64, max: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("eigensolver did not converge within {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("solution positivity violated: min component {min:.3e} below -{tol:.3e}")]
    Positivity { min: f64, tol: f64 },
    #[error("rate fit: {0}")]
    Fit(String),
    #[error("matrixlab: {0}")]
    Dense(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
