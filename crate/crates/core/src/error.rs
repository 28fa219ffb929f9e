use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty density: the pdf vanishes on every cell of the domain")]
    EmptyDensity,

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("densities live on different grids")]
    GridMismatch,

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("NaN field: first-variation field is not finite at cell {cell}")]
    NonFiniteField { cell: usize },

    #[error("CFL violation: dt = {dt:e} exceeds the admissible dt = {admissible:e}")]
    CflViolation { dt: f64, admissible: f64 },

    #[error("Newton best response did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("Gibbs fixed point did not converge after {iterations} iterations (L1 change {residual:e})")]
    FixedPointDiverged { iterations: usize, residual: f64 },

    #[error("best response violates the a-priori bound: |x|^2 = {norm_sq:e} > {bound:e}")]
    BestResponseBound { norm_sq: f64, bound: f64 },

    #[error("decay fit needs at least 5 usable points, got {usable}")]
    DecayFit { usable: usize },

    #[error("unsupported: {0}")]
    Unsupported(&'static str),

    #[error("solver failure at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    /// True for failures raised by the numerical solvers (as opposed to
    /// configuration or I/O problems).
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::Step { .. }
            | Error::NonFiniteField { .. }
            | Error::CflViolation { .. }
            | Error::NewtonDiverged { .. }
            | Error::FixedPointDiverged { .. }
            | Error::BestResponseBound { .. }
            | Error::DecayFit { .. } => true,
            _ => false,
        }
    }
}
