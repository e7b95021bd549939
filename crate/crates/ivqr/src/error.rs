//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural invariant (shapes, ranges, finiteness).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A matrix that must be invertible is rank deficient.
    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    /// A bandwidth formula hit a zero denominator (degenerate regressors or
    /// a quantile level at which the plug-in constant vanishes).
    #[error("degenerate bandwidth denominator: {0}")]
    DegenerateBandwidth(String),

    /// An input combination makes the requested quantity undefined.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An iterative solver failed to produce a usable estimate.
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// Too many bootstrap draws failed to refit.
    #[error("bootstrap failure: {0}")]
    Bootstrap(String),
}

pub type Result<T> = std::result::Result<T, Error>;
