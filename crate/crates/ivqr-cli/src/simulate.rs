//! Monte Carlo harness: generate replications, run the requested
//! estimators, and assemble relative robust-RMSE tables.
//!
//! Determinism contract: every replication draws from a stream keyed by
//! (seed, model, dgp index, tau index, replication), bootstrap draws key
//! further by draw index, and all reductions run in replication order, so
//! outputs are identical for any worker count.

use crate::config::{DgpRecord, EstimatorKind, Model, SimulationConfig};
use crate::error::{CliError, CliResult};
use ivqr::averaging::{AdditionalMoments, AveragingOptions, JacobianBandwidth, Pipeline};
use ivqr::bootstrap::{bootstrap_average, simplex_weight_grid, WeightTriple};
use ivqr::data::{Dataset, QuantileLevel};
use ivqr::dgp::{
    gen_model1, gen_model2, gen_model3, ErrorKind, InterceptKind, Model1Params, Model2Params,
    Model3Params,
};
use ivqr::gmm::GmmConfig;
use ivqr::metrics::{relative_rrmse_row, EstimateSet, MetricsTable};
use ivqr::rng::{keyed_rng, stream_key};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

// Sub-stream tags so different consumers of a replication key never collide.
const STREAM_DATA: u64 = 0;
const STREAM_BOOTSTRAP: u64 = 7;

fn parse_error_kind(record: &DgpRecord) -> CliResult<ErrorKind> {
    match record.error_kind.as_deref() {
        None => Ok(ErrorKind::Gaussian),
        Some(s) => match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(ErrorKind::Gaussian),
            "chisq4" | "chi2" | "chisq" => Ok(ErrorKind::ChiSq4Transformed),
            other => Err(CliError::Validation(format!(
                "unknown error_kind '{other}'"
            ))),
        },
    }
}

/// A DGP record resolved against its model.
#[derive(Debug, Clone)]
enum ResolvedDgp {
    M1(Model1Params),
    M2(Model2Params),
    M3(Model3Params),
}

fn resolve_dgp(model: Model, record: &DgpRecord) -> CliResult<ResolvedDgp> {
    match model {
        Model::M1 => {
            let c1 = record
                .c1
                .ok_or_else(|| CliError::Validation("model M1 needs c1".to_string()))?;
            let intercept = match record.c3 {
                Some(dof) => InterceptKind::StudentT { dof },
                None => InterceptKind::ChiSq3,
            };
            let c2 = record.c2.unwrap_or(0.0);
            let p = Model1Params { c1, c2, intercept };
            p.validate().map_err(CliError::from)?;
            Ok(ResolvedDgp::M1(p))
        }
        Model::M2 => {
            let c0 = record
                .c0
                .ok_or_else(|| CliError::Validation("model M2 needs c0".to_string()))?;
            let p = Model2Params {
                c0,
                error: parse_error_kind(record)?,
            };
            p.validate().map_err(CliError::from)?;
            Ok(ResolvedDgp::M2(p))
        }
        Model::M3 => {
            let c0 = record
                .c0
                .ok_or_else(|| CliError::Validation("model M3 needs c0".to_string()))?;
            let hetero = record
                .hetero
                .ok_or_else(|| CliError::Validation("model M3 needs hetero".to_string()))?;
            let p = Model3Params {
                c0,
                hetero,
                error: parse_error_kind(record)?,
            };
            p.validate().map_err(CliError::from)?;
            Ok(ResolvedDgp::M3(p))
        }
    }
}

impl ResolvedDgp {
    fn descriptors(&self) -> Vec<(String, String)> {
        match self {
            ResolvedDgp::M1(p) => {
                let c3 = match p.intercept {
                    InterceptKind::ChiSq3 => "NA".to_string(),
                    InterceptKind::StudentT { dof } => format!("{dof}"),
                };
                vec![
                    ("c1".into(), format!("{}", p.c1)),
                    ("c2".into(), format!("{}", p.c2)),
                    ("c3".into(), c3),
                ]
            }
            ResolvedDgp::M2(p) => vec![
                ("c0".into(), format!("{}", p.c0)),
                ("error".into(), error_name(p.error).into()),
            ],
            ResolvedDgp::M3(p) => vec![
                ("c0".into(), format!("{}", p.c0)),
                ("hetero".into(), format!("{}", p.hetero)),
                ("error".into(), error_name(p.error).into()),
            ],
        }
    }

    fn generate<R: ivqr::rand::Rng + ?Sized>(
        &self,
        n: usize,
        tau: QuantileLevel,
        rng: &mut R,
    ) -> ivqr::Result<(Dataset, DVector<f64>)> {
        match self {
            ResolvedDgp::M1(p) => {
                let (ds, truth) = gen_model1(p, n, rng)?;
                Ok((ds, truth.at(tau.get())))
            }
            ResolvedDgp::M2(p) => gen_model2(p, n, tau, rng),
            ResolvedDgp::M3(p) => gen_model3(p, n, tau, rng),
        }
    }

    // Coefficient indices entering the rRMSE. Design 1 is scored on the
    // treatment-effect slope; designs 2 and 3 on all six slopes.
    fn eval_columns(&self, d_x: usize) -> Vec<usize> {
        match self {
            ResolvedDgp::M1(_) => vec![1],
            _ => (0..d_x).collect(),
        }
    }

    // Truth restricted to the evaluated coefficients.
    fn eval_truth(&self, truth: &DVector<f64>) -> DVector<f64> {
        match self {
            ResolvedDgp::M1(_) => DVector::from_element(1, truth[1]),
            _ => truth.clone(),
        }
    }

    fn jacobian_route(&self) -> JacobianBandwidth {
        match self {
            ResolvedDgp::M1(_) => JacobianBandwidth::NonparametricBinary,
            _ => JacobianBandwidth::PluginGaussian,
        }
    }
}

fn error_name(e: ErrorKind) -> &'static str {
    match e {
        ErrorKind::Gaussian => "gaussian",
        ErrorKind::ChiSq4Transformed => "chisq4",
    }
}

// One replication's coefficient vectors per estimator.
fn run_replication(
    dgp: &ResolvedDgp,
    estimators: &[EstimatorKind],
    n: usize,
    tau: QuantileLevel,
    weight_grid: &[WeightTriple],
    bootstrap_draws: usize,
    seed: u64,
    key: &[u64],
) -> ivqr::Result<Vec<(EstimatorKind, DVector<f64>)>> {
    let mut rng = keyed_rng(seed, &[key[0], key[1], key[2], key[3], STREAM_DATA]);
    let (data, _truth) = dgp.generate(n, tau, &mut rng)?;

    let cfg = GmmConfig::default();
    let opts = AveragingOptions {
        jacobian_bandwidth: dgp.jacobian_route(),
        ..Default::default()
    };
    let mut pipe = Pipeline::new(&data, tau, cfg.clone(), opts);
    let mut out: Vec<(EstimatorKind, DVector<f64>)> = Vec::with_capacity(estimators.len());

    let want = |k: EstimatorKind| estimators.contains(&k);
    let mut avg_qr = None;
    let mut avg_2sls = None;
    if want(EstimatorKind::AvgQr) || want(EstimatorKind::AggQr) {
        avg_qr = Some(pipe.averaging(AdditionalMoments::Qr)?);
    }
    if want(EstimatorKind::Avg2sls) || want(EstimatorKind::Agg2sls) {
        avg_2sls = Some(pipe.averaging(AdditionalMoments::TwoSlsSlope)?);
    }

    for &kind in estimators {
        let beta = match kind {
            EstimatorKind::Ivqr => pipe.conservative()?.beta.clone(),
            EstimatorKind::Qr => pipe.qr()?.beta.clone(),
            EstimatorKind::Tsls => pipe.tsls()?.beta.clone(),
            EstimatorKind::AvgQr => avg_qr.as_ref().expect("computed above").beta_avg.clone(),
            EstimatorKind::AggQr => avg_qr
                .as_ref()
                .expect("computed above")
                .beta_aggressive
                .clone(),
            EstimatorKind::Avg2sls => avg_2sls.as_ref().expect("computed above").beta_avg.clone(),
            EstimatorKind::Agg2sls => avg_2sls
                .as_ref()
                .expect("computed above")
                .beta_aggressive
                .clone(),
            EstimatorKind::BsAvg => {
                let bs_seed = stream_key(seed, &[key[0], key[1], key[2], key[3], STREAM_BOOTSTRAP]);
                bootstrap_average(&data, tau, bootstrap_draws, weight_grid, bs_seed, &cfg)?.beta_bs
            }
        };
        out.push((kind, beta));
    }
    Ok(out)
}

/// Relative rRMSE cells for one (DGP, tau) pair plus bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct CellRow {
    pub dgp: String,
    pub descriptors: BTreeMap<String, String>,
    pub relative: BTreeMap<String, f64>,
    pub baseline_rrmse: f64,
    pub replications_used: usize,
    pub replications_dropped: usize,
}

/// All cells for one quantile level.
#[derive(Debug, Clone, Serialize)]
pub struct TauTable {
    pub tau: f64,
    pub estimators: Vec<String>,
    pub rows: Vec<CellRow>,
    #[serde(skip)]
    pub table: Option<MetricsTable>,
}

/// Everything `simulate` produces, serialized to `results.json`.
#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub config: SimulationConfig,
    pub replications: usize,
    pub estimators: Vec<String>,
    pub tables: Vec<TauTable>,
}

/// Run the full simulation study described by `config`.
pub fn run_simulate(config: &SimulationConfig) -> CliResult<SimulateOutput> {
    let seed = config
        .seed
        .ok_or_else(|| CliError::Validation("simulate requires a seed".to_string()))?;
    let m = config.replications();
    if m < 2 {
        return Err(CliError::Validation(format!(
            "need at least 2 replications, got {m}"
        )));
    }
    let estimators = config.estimators();
    if estimators.is_empty() {
        return Err(CliError::Validation("no estimators selected".to_string()));
    }
    if !estimators.contains(&EstimatorKind::Ivqr) {
        return Err(CliError::Validation(
            "the IVQR baseline estimator must be included".to_string(),
        ));
    }
    if estimators.contains(&EstimatorKind::BsAvg) && config.bootstrap_draws == 0 {
        return Err(CliError::Validation(
            "BS_AVG requires bootstrap_draws >= 1".to_string(),
        ));
    }
    if config.dgp_grid.is_empty() {
        return Err(CliError::Validation("empty dgp_grid".to_string()));
    }

    let resolved: Vec<ResolvedDgp> = config
        .dgp_grid
        .iter()
        .map(|r| resolve_dgp(config.model, r))
        .collect::<CliResult<_>>()?;
    let weight_grid = simplex_weight_grid(config.grid_steps);
    let estimator_names: Vec<String> = estimators.iter().map(|e| e.name().to_string()).collect();

    let mut tables = Vec::new();
    for (tau_idx, &tau_v) in config.taus.iter().enumerate() {
        let tau = QuantileLevel::new(tau_v).map_err(CliError::from)?;
        let descriptor_names: Vec<String> = resolved[0]
            .descriptors()
            .iter()
            .map(|(k, _)| k.clone())
            .collect();
        let mut table =
            MetricsTable::new("IVQR", estimator_names.clone(), descriptor_names.clone());
        let mut rows = Vec::new();

        for (dgp_idx, dgp) in resolved.iter().enumerate() {
            let reps: Vec<Option<Vec<(EstimatorKind, DVector<f64>)>>> = (0..m)
                .into_par_iter()
                .map(|rep| {
                    let key = [
                        config.model.id(),
                        dgp_idx as u64,
                        tau_idx as u64,
                        rep as u64,
                    ];
                    run_replication(
                        dgp,
                        &estimators,
                        config.n,
                        tau,
                        &weight_grid,
                        config.bootstrap_draws,
                        seed,
                        &key,
                    )
                    .ok()
                })
                .collect();

            let kept: Vec<&Vec<(EstimatorKind, DVector<f64>)>> = reps.iter().flatten().collect();
            let dropped = m - kept.len();
            if dropped * 20 > m {
                return Err(CliError::Solver(format!(
                    "dgp {dgp_idx} at tau {tau_v}: {dropped} of {m} replications failed"
                )));
            }
            if kept.len() < 2 {
                return Err(CliError::Solver(format!(
                    "dgp {dgp_idx} at tau {tau_v}: not enough successful replications"
                )));
            }

            // regenerate one draw only to learn the truth vector for this tau
            let truth_full = {
                let mut rng = keyed_rng(
                    seed,
                    &[
                        config.model.id(),
                        dgp_idx as u64,
                        tau_idx as u64,
                        0,
                        STREAM_DATA,
                    ],
                );
                dgp.generate(config.n, tau, &mut rng)
                    .map_err(CliError::from)?
                    .1
            };
            let truth = dgp.eval_truth(&truth_full);

            let sets: Vec<EstimateSet> = estimators
                .iter()
                .enumerate()
                .map(|(j, kind)| {
                    let cols = dgp.eval_columns(kept[0][j].1.len());
                    let est =
                        DMatrix::from_fn(kept.len(), cols.len(), |r, c| kept[r][j].1[cols[c]]);
                    EstimateSet {
                        name: kind.name().to_string(),
                        estimates: est,
                    }
                })
                .collect();
            let row = relative_rrmse_row(&sets, &truth, "IVQR").map_err(CliError::from)?;

            let descriptors = dgp.descriptors();
            let dgp_label = format!("{}", dgp_idx + 1);
            table
                .push_row(
                    dgp_label.clone(),
                    descriptors.iter().map(|(_, v)| v.clone()).collect(),
                    row.clone(),
                )
                .map_err(CliError::from)?;
            rows.push(CellRow {
                dgp: dgp_label,
                descriptors: descriptors.into_iter().collect(),
                relative: row
                    .names
                    .iter()
                    .cloned()
                    .zip(row.relative.iter().cloned())
                    .collect(),
                baseline_rrmse: row.baseline_rrmse,
                replications_used: kept.len(),
                replications_dropped: dropped,
            });
        }
        tables.push(TauTable {
            tau: tau_v,
            estimators: estimator_names.clone(),
            rows,
            table: Some(table),
        });
    }

    Ok(SimulateOutput {
        config: config.clone(),
        replications: m,
        estimators: estimator_names,
        tables,
    })
}

/// Write the per-tau CSV tables, `results.json`, and `plotdata.csv`.
pub fn write_outputs(out: &SimulateOutput, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    for t in &out.tables {
        if let Some(table) = &t.table {
            let path = dir.join(format!("rrmse_tau{}.csv", t.tau));
            std::fs::write(path, table.to_csv())?;
        }
    }
    let json = serde_json::to_string_pretty(out)
        .map_err(|e| CliError::Validation(format!("serialization failed: {e}")))?;
    std::fs::write(dir.join("results.json"), json + "\n")?;

    let mut plot = String::from("model,tau,dgp,estimator,value\n");
    let model = format!("{:?}", out.config.model);
    for t in &out.tables {
        for row in &t.rows {
            for (est, val) in &row.relative {
                plot.push_str(&format!("{model},{},{},{est},{val}\n", t.tau, row.dgp));
            }
        }
    }
    std::fs::write(dir.join("plotdata.csv"), plot)?;
    Ok(())
}
