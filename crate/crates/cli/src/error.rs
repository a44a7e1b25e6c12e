use std::fmt;

use gpmkl::GpError;

/// A failed command, classified by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments (exit 1).
    Usage(String),
    /// Unreadable, malformed or inconsistent files (exit 2).
    Data(String),
    /// Inference broke down, including EP and Laplace both failing (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::NotPositiveDefinite { .. }
            | GpError::NewtonDivergence { .. }
            | GpError::ConvergenceFailure(_)
            | GpError::NonFiniteObjective
            | GpError::NegativeVariance(_)
            | GpError::DegenerateFold(_)
            | GpError::InferenceFailed { .. } => CliError::Numerical(e.to_string()),
            GpError::DimensionMismatch { .. }
            | GpError::NonFinite(_)
            | GpError::Empty(_)
            | GpError::InvalidArgument(_)
            | GpError::IndexOutOfRange { .. } => CliError::Data(e.to_string()),
        }
    }
}

/// Wraps I/O failures with the path involved.
pub fn io_context(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;
