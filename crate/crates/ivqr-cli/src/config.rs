//! Simulation configuration: models, DGP grids, and estimator selection.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Which simulation design to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Model {
    M1,
    M2,
    M3,
}

impl Model {
    pub fn id(self) -> u64 {
        match self {
            Model::M1 => 1,
            Model::M2 => 2,
            Model::M3 => 3,
        }
    }

    /// Replication count the headline experiments use.
    pub fn default_replications(self) -> usize {
        match self {
            Model::M1 => 400,
            Model::M2 | Model::M3 => 200,
        }
    }
}

/// The estimators the harness can run. `Ivqr` (the conservative GMM
/// estimator) is always the relative-rRMSE baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
pub enum EstimatorKind {
    #[serde(rename = "IVQR")]
    Ivqr,
    #[serde(rename = "QR")]
    Qr,
    #[serde(rename = "TSLS")]
    Tsls,
    #[serde(rename = "AVG_QR")]
    AvgQr,
    #[serde(rename = "AVG_2SLS")]
    Avg2sls,
    #[serde(rename = "BS_AVG")]
    BsAvg,
    #[serde(rename = "AGG_QR")]
    AggQr,
    #[serde(rename = "AGG_2SLS")]
    Agg2sls,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Ivqr,
        EstimatorKind::Qr,
        EstimatorKind::Tsls,
        EstimatorKind::AvgQr,
        EstimatorKind::Avg2sls,
        EstimatorKind::BsAvg,
        EstimatorKind::AggQr,
        EstimatorKind::Agg2sls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ivqr => "IVQR",
            EstimatorKind::Qr => "QR",
            EstimatorKind::Tsls => "TSLS",
            EstimatorKind::AvgQr => "AVG_QR",
            EstimatorKind::Avg2sls => "AVG_2SLS",
            EstimatorKind::BsAvg => "BS_AVG",
            EstimatorKind::AggQr => "AGG_QR",
            EstimatorKind::Agg2sls => "AGG_2SLS",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        let canon = name.to_ascii_uppercase().replace('-', "_");
        Self::ALL.iter().copied().find(|e| e.name() == canon)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One DGP in the grid; which fields are required depends on the model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DgpRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    /// Fat-tail degrees of freedom; selects the t intercept in model 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hetero: Option<f64>,
    /// "gaussian" (default) or "chisq4".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
}

/// Full configuration for `simulate`. All fields except the seed have
/// defaults matching the headline experiments (n = 1000, B = 50,
/// 400 replications for model 1 and 200 for models 2 and 3, k = 164).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub model: Model,
    pub dgp_grid: Vec<DgpRecord>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default = "default_bootstrap_draws")]
    pub bootstrap_draws: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub estimators: Option<Vec<EstimatorKind>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_grid_steps")]
    pub grid_steps: usize,
    /// Where to write outputs; not echoed into `results.json` so reports
    /// are byte-identical wherever they are written.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: String,
}

fn default_n() -> usize {
    1000
}

fn default_bootstrap_draws() -> usize {
    50
}

fn default_taus() -> Vec<f64> {
    vec![0.5]
}

fn default_grid_steps() -> usize {
    164
}

fn default_output_dir() -> String {
    "ivqr-sim-out".to_string()
}

impl SimulationConfig {
    pub fn replications(&self) -> usize {
        self.replications
            .unwrap_or_else(|| self.model.default_replications())
    }

    pub fn estimators(&self) -> Vec<EstimatorKind> {
        self.estimators
            .clone()
            .unwrap_or_else(|| EstimatorKind::ALL.to_vec())
    }
}
