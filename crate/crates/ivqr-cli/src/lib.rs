//! Library behind the `ivqr` command-line driver: simulation configuration,
//! the Monte Carlo harness, and estimation on user data.

pub mod config;
pub mod error;
pub mod estimate;
pub mod simulate;

pub use config::{DgpRecord, EstimatorKind, Model, SimulationConfig};
pub use error::{CliError, CliResult};
pub use simulate::{run_simulate, write_outputs, SimulateOutput};

/// Environment variable overriding the worker-pool size.
pub const WORKERS_ENV: &str = "IVQR_WORKERS";

/// Initialize the global worker pool from the environment; all available
/// parallelism when unset.
pub fn init_workers() {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
