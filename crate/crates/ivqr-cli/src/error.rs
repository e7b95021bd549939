//! CLI error type with process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad inputs: missing columns, malformed cells, violated invariants.
    #[error("{0}")]
    Validation(String),

    /// An estimator failed to produce a result.
    #[error("{0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Exit code: 2 for validation problems, 3 for solver failures, 1 for i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ivqr::Error> for CliError {
    fn from(e: ivqr::Error) -> Self {
        match e {
            ivqr::Error::SolverFailure(_) | ivqr::Error::Bootstrap(_) => {
                CliError::Solver(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
