//! Instrumental-variables quantile regression with averaging estimation.
//!
//! The crate provides smoothed two-step GMM estimators for IVQR (a
//! conservative stack on the instrument moments and aggressive stacks that
//! append quantile or 2SLS slope moments), the empirical optimal averaging
//! weight between them, a bootstrap method that averages the IVQR, 2SLS,
//! and QR estimators directly, plug-in Jacobian bandwidths, data generators
//! for three simulation designs, and robust-RMSE metrics.

pub mod averaging;
pub mod bootstrap;
pub mod classical;
pub mod data;
pub mod dgp;
pub mod error;
pub mod gmm;
mod linalg;
pub mod metrics;
pub mod moments;
pub mod rng;
pub mod smoothing;

pub use data::{Dataset, EstimatorResult, MomentKind, MomentSet, QuantileLevel};
pub use error::{Error, Result};

// Re-exported so downstream crates stay on the same RNG version.
pub use rand;
