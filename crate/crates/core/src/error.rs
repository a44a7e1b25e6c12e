use thiserror::Error;

/// Errors produced by kernel evaluation, inference, optimization and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("matrix is not positive definite after jitter escalation (last jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("Newton iterations did not converge within {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("expectation propagation failed: {0}")]
    ConvergenceFailure(String),

    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,

    #[error("predictive variance {0:e} is negative beyond round-off")]
    NegativeVariance(f64),

    #[error("all mixing weights are zero in fold {0}")]
    DegenerateFold(usize),

    #[error("inference failed with both EP ({ep}) and Laplace ({laplace})")]
    InferenceFailed { ep: String, laplace: String },
}

pub type Result<T> = std::result::Result<T, GpError>;
