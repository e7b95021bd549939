//! Estimation on user-supplied CSV data and dataset generation.

use crate::config::EstimatorKind;
use crate::error::{CliError, CliResult};
use ivqr::averaging::{AdditionalMoments, AveragingOptions, JacobianBandwidth, Pipeline};
use ivqr::bootstrap::{bootstrap_average, simplex_weight_grid};
use ivqr::data::{Dataset, QuantileLevel};
use ivqr::dgp::{
    gen_model1, gen_model2, gen_model3, ErrorKind, InterceptKind, Model1Params, Model2Params,
    Model3Params,
};
use ivqr::gmm::GmmConfig;
use ivqr::rng::keyed_rng;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// Column roles for `estimate`.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub outcome: String,
    pub exog: Vec<String>,
    pub endog: Vec<String>,
    pub excl_instruments: Vec<String>,
    /// Prepend an all-ones intercept column to the exogenous block.
    pub add_intercept: bool,
}

/// Parsed CSV with named numeric columns.
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::Validation(e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CliError::Validation(e.to_string()))?;
            if record.len() != headers.len() {
                return Err(CliError::Validation(format!(
                    "row {} has {} fields, header has {}",
                    line + 2,
                    record.len(),
                    headers.len()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    CliError::Validation(format!(
                        "non-numeric cell '{field}' in column '{}' (row {})",
                        headers[j],
                        line + 2
                    ))
                })?;
                columns[j].push(v);
            }
        }
        Ok(Self { headers, columns })
    }

    fn column(&self, name: &str) -> CliResult<&[f64]> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Validation(format!("missing column '{name}'")))?;
        Ok(&self.columns[idx])
    }

    fn block(&self, names: &[String], n: usize) -> CliResult<DMatrix<f64>> {
        let mut m = DMatrix::zeros(n, names.len());
        for (j, name) in names.iter().enumerate() {
            let col = self.column(name)?;
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        Ok(m)
    }

    /// Assemble a dataset from the named column roles.
    pub fn to_dataset(&self, spec: &ColumnSpec) -> CliResult<Dataset> {
        let y_col = self.column(&spec.outcome)?;
        let n = y_col.len();
        if n == 0 {
            return Err(CliError::Validation("no data rows".to_string()));
        }
        let y = DVector::from_column_slice(y_col);
        let exog_named = self.block(&spec.exog, n)?;
        let exog = if spec.add_intercept {
            let mut m = DMatrix::from_element(n, exog_named.ncols() + 1, 1.0);
            m.view_mut((0, 1), (n, exog_named.ncols()))
                .copy_from(&exog_named);
            m
        } else {
            exog_named
        };
        let endog = self.block(&spec.endog, n)?;
        let excl = self.block(&spec.excl_instruments, n)?;
        Dataset::new(y, exog, endog, excl).map_err(CliError::from)
    }
}

/// Coefficient names in design order (exogenous block then endogenous).
pub fn coefficient_names(spec: &ColumnSpec) -> Vec<String> {
    let mut names = Vec::new();
    if spec.add_intercept {
        names.push("(intercept)".to_string());
    }
    names.extend(spec.exog.iter().cloned());
    names.extend(spec.endog.iter().cloned());
    names
}

#[derive(Debug, Clone, Serialize)]
pub struct AveragingDiagnostics {
    pub weight: f64,
    pub weight_raw: f64,
    pub smoothing_bandwidth: f64,
    pub jacobian_bandwidth: f64,
    pub jacobian_method: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapDiagnostics {
    pub weights: [f64; 3],
    pub grid_size: usize,
    pub draws_used: usize,
    pub draws_skipped: usize,
}

/// JSON report for `estimate`. Timings are only attached on request so the
/// default report is byte-identical across runs with the same seed.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub tau: f64,
    pub n: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub coefficient_names: Vec<String>,
    pub estimates: BTreeMap<String, Vec<f64>>,
    pub averaging: BTreeMap<String, AveragingDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

pub struct EstimateRequest {
    pub methods: Vec<EstimatorKind>,
    pub tau: f64,
    pub bootstrap_draws: usize,
    pub grid_steps: usize,
    pub seed: u64,
    pub with_timings: bool,
}

/// Run the requested estimators on a dataset.
pub fn run_estimate(
    data: &Dataset,
    names: Vec<String>,
    req: &EstimateRequest,
) -> CliResult<EstimateReport> {
    let tau = QuantileLevel::new(req.tau).map_err(CliError::from)?;
    let cfg = GmmConfig::default();
    let opts = AveragingOptions {
        jacobian_bandwidth: JacobianBandwidth::PluginGaussian,
        ..Default::default()
    };
    let mut pipe = Pipeline::new(data, tau, cfg.clone(), opts);
    let mut estimates = BTreeMap::new();
    let mut averaging = BTreeMap::new();
    let mut bootstrap = None;
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();

    for &method in &req.methods {
        let t0 = std::time::Instant::now();
        match method {
            EstimatorKind::Tsls => {
                estimates.insert(method.name().to_string(), vecof(&pipe.tsls()?.beta));
            }
            EstimatorKind::Qr => {
                estimates.insert(method.name().to_string(), vecof(&pipe.qr()?.beta));
            }
            EstimatorKind::Ivqr => {
                estimates.insert(method.name().to_string(), vecof(&pipe.conservative()?.beta));
            }
            EstimatorKind::AggQr
            | EstimatorKind::Agg2sls
            | EstimatorKind::AvgQr
            | EstimatorKind::Avg2sls => {
                let additional = match method {
                    EstimatorKind::AggQr | EstimatorKind::AvgQr => AdditionalMoments::Qr,
                    _ => AdditionalMoments::TwoSlsSlope,
                };
                let res = pipe.averaging(additional)?;
                let beta = match method {
                    EstimatorKind::AggQr | EstimatorKind::Agg2sls => &res.beta_aggressive,
                    _ => &res.beta_avg,
                };
                estimates.insert(method.name().to_string(), vecof(beta));
                if matches!(method, EstimatorKind::AvgQr | EstimatorKind::Avg2sls) {
                    averaging.insert(
                        method.name().to_string(),
                        AveragingDiagnostics {
                            weight: res.weight,
                            weight_raw: res.weight_raw,
                            smoothing_bandwidth: res.smoothing_bandwidth,
                            jacobian_bandwidth: res.jacobian_bandwidth.h,
                            jacobian_method: format!("{:?}", res.jacobian_bandwidth.method),
                        },
                    );
                }
            }
            EstimatorKind::BsAvg => {
                let grid = simplex_weight_grid(req.grid_steps);
                let res = bootstrap_average(data, tau, req.bootstrap_draws, &grid, req.seed, &cfg)?;
                estimates.insert(method.name().to_string(), vecof(&res.beta_bs));
                bootstrap = Some(BootstrapDiagnostics {
                    weights: [
                        res.optimal_weight.w1,
                        res.optimal_weight.w2,
                        res.optimal_weight.w3,
                    ],
                    grid_size: grid.len(),
                    draws_used: res.draws_used,
                    draws_skipped: res.draws_skipped,
                });
            }
        }
        timings.insert(method.name().to_string(), t0.elapsed().as_secs_f64() * 1e3);
    }

    Ok(EstimateReport {
        tau: req.tau,
        n: data.n(),
        d_x: data.d_x(),
        d_z: data.d_z(),
        coefficient_names: names,
        estimates,
        averaging,
        bootstrap,
        timings_ms: req.with_timings.then_some(timings),
    })
}

fn vecof(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

/// Serialize a generated dataset as CSV with columns named
/// `y, d1..., xexog1..., z1...`.
pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut header = vec!["y".to_string()];
    for j in 0..data.d_endog() {
        header.push(format!("d{}", j + 1));
    }
    for j in 0..data.d_exog() {
        header.push(format!("xexog{}", j + 1));
    }
    for j in 0..data.z_excl().ncols() {
        header.push(format!("z{}", j + 1));
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..data.n() {
        let mut fields = vec![format!("{}", data.y()[i])];
        for j in 0..data.d_endog() {
            fields.push(format!("{}", data.endog()[(i, j)]));
        }
        for j in 0..data.d_exog() {
            fields.push(format!("{}", data.x_exog()[(i, j)]));
        }
        for j in 0..data.z_excl().ncols() {
            fields.push(format!("{}", data.z_excl()[(i, j)]));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Generate one draw of a simulation design for `gen-data`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    model: &str,
    n: usize,
    tau: f64,
    seed: u64,
    c0: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    c3: Option<f64>,
    hetero: Option<f64>,
    error_kind: Option<&str>,
) -> CliResult<Dataset> {
    let err_kind = match error_kind {
        None => ErrorKind::Gaussian,
        Some(s) => match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => ErrorKind::Gaussian,
            "chisq4" | "chi2" | "chisq" => ErrorKind::ChiSq4Transformed,
            other => {
                return Err(CliError::Validation(format!(
                    "unknown error kind '{other}'"
                )))
            }
        },
    };
    let tau = QuantileLevel::new(tau).map_err(CliError::from)?;
    let mut rng = keyed_rng(seed, &[100]);
    let ds = match model.to_ascii_lowercase().as_str() {
        "m1" => {
            let intercept = match c3 {
                Some(dof) => InterceptKind::StudentT { dof },
                None => InterceptKind::ChiSq3,
            };
            let p = Model1Params {
                c1: c1.ok_or_else(|| CliError::Validation("m1 needs --c1".into()))?,
                c2: c2.unwrap_or(0.0),
                intercept,
            };
            gen_model1(&p, n, &mut rng).map_err(CliError::from)?.0
        }
        "m2" => {
            let p = Model2Params {
                c0: c0.ok_or_else(|| CliError::Validation("m2 needs --c0".into()))?,
                error: err_kind,
            };
            gen_model2(&p, n, tau, &mut rng).map_err(CliError::from)?.0
        }
        "m3" => {
            let p = Model3Params {
                c0: c0.ok_or_else(|| CliError::Validation("m3 needs --c0".into()))?,
                hetero: hetero.ok_or_else(|| CliError::Validation("m3 needs --hetero".into()))?,
                error: err_kind,
            };
            gen_model3(&p, n, tau, &mut rng).map_err(CliError::from)?.0
        }
        other => return Err(CliError::Validation(format!("unknown model '{other}'"))),
    };
    Ok(ds)
}
