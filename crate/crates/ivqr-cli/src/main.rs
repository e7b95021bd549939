use clap::{Args, Parser, Subcommand};
use ivqr_cli::config::{EstimatorKind, SimulationConfig};
use ivqr_cli::error::{CliError, CliResult};
use ivqr_cli::estimate::{
    coefficient_names, dataset_to_csv, generate_dataset, run_estimate, ColumnSpec, EstimateRequest,
    Table,
};
use ivqr_cli::simulate::{run_simulate, write_outputs};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ivqr",
    about = "Instrumental-variables quantile regression with averaging estimators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo simulation study from a JSON config.
    Simulate(SimulateArgs),
    /// Generate one draw of a simulation design as CSV.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Quantile level.
    #[arg(long)]
    tau: f64,
    /// Outcome column name.
    #[arg(long)]
    outcome: String,
    /// Comma-separated endogenous regressor columns.
    #[arg(long, value_delimiter = ',', default_value = "")]
    endog: Vec<String>,
    /// Comma-separated exogenous regressor columns.
    #[arg(long, value_delimiter = ',', default_value = "")]
    exog: Vec<String>,
    /// Comma-separated excluded instrument columns.
    #[arg(long, value_delimiter = ',', default_value = "")]
    excl_instruments: Vec<String>,
    /// Methods to run (ivqr, qr, tsls, avg-qr, avg-2sls, bs-avg, agg-qr, agg-2sls).
    #[arg(long, value_delimiter = ',', default_value = "ivqr")]
    method: Vec<String>,
    /// Prepend an all-ones intercept to the exogenous block.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    intercept: bool,
    /// Bootstrap draws for bs-avg.
    #[arg(long, default_value_t = 50)]
    bootstrap_draws: usize,
    /// Simplex grid steps for bs-avg.
    #[arg(long, default_value_t = 164)]
    grid_steps: usize,
    /// RNG seed (bootstrap resampling).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include per-method timings in the JSON report (breaks byte-for-byte
    /// reproducibility of the report file).
    #[arg(long, default_value_t = false)]
    timings: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// RNG seed; overrides any seed in the config file.
    #[arg(long)]
    seed: u64,
    /// Output directory; overrides the config file.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// m1, m2, or m3.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Quantile level used for error recentering.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    c3: Option<f64>,
    #[arg(long)]
    hetero: Option<f64>,
    /// gaussian (default) or chisq4.
    #[arg(long)]
    error_kind: Option<String>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn non_empty(v: &[String]) -> Vec<String> {
    v.iter().filter(|s| !s.is_empty()).cloned().collect()
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult<()> {
    let methods: Vec<EstimatorKind> = args
        .method
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            EstimatorKind::parse(s)
                .ok_or_else(|| CliError::Validation(format!("unknown method '{s}'")))
        })
        .collect::<CliResult<_>>()?;
    if methods.is_empty() {
        return Err(CliError::Validation("no methods requested".to_string()));
    }
    let spec = ColumnSpec {
        outcome: args.outcome.clone(),
        exog: non_empty(&args.exog),
        endog: non_empty(&args.endog),
        excl_instruments: non_empty(&args.excl_instruments),
        add_intercept: args.intercept,
    };
    let table = Table::read(&args.data)?;
    let data = table.to_dataset(&spec)?;
    let req = EstimateRequest {
        methods,
        tau: args.tau,
        bootstrap_draws: args.bootstrap_draws,
        grid_steps: args.grid_steps,
        seed: args.seed,
        with_timings: args.timings,
    };
    let report = run_estimate(&data, coefficient_names(&spec), &req)?;

    println!(
        "n = {}, d_X = {}, d_Z = {}, tau = {}",
        report.n, report.d_x, report.d_z, report.tau
    );
    for (method, beta) in &report.estimates {
        let rendered: Vec<String> = report
            .coefficient_names
            .iter()
            .zip(beta)
            .map(|(name, b)| format!("{name} = {b:.6}"))
            .collect();
        println!("{method}: {}", rendered.join(", "));
    }
    for (method, diag) in &report.averaging {
        println!(
            "{method} weight = {:.4} (raw {:.4}), h = {:.5}, jacobian h = {:.5} [{}]",
            diag.weight,
            diag.weight_raw,
            diag.smoothing_bandwidth,
            diag.jacobian_bandwidth,
            diag.jacobian_method
        );
    }
    if let Some(bs) = &report.bootstrap {
        println!(
            "BS_AVG weights (ivqr, tsls, qr) = ({:.4}, {:.4}, {:.4}); {} draws, {} skipped",
            bs.weights[0], bs.weights[1], bs.weights[2], bs.draws_used, bs.draws_skipped
        );
    }
    if let Some(t) = &report.timings_ms {
        for (method, ms) in t {
            println!("{method}: {ms:.1} ms");
        }
    }

    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Validation(format!("serialization failed: {e}")))?;
        std::fs::write(path, json + "\n")?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let raw = std::fs::read_to_string(&args.config)?;
    let mut config: SimulationConfig =
        serde_json::from_str(&raw).map_err(|e| CliError::Validation(format!("bad config: {e}")))?;
    config.seed = Some(args.seed);
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.display().to_string();
    }
    let started = std::time::Instant::now();
    let out = run_simulate(&config)?;
    let dir = PathBuf::from(&config.output_dir);
    write_outputs(&out, &dir)?;
    eprintln!(
        "wrote {} table(s) to {} in {:.1}s",
        out.tables.len(),
        dir.display(),
        started.elapsed().as_secs_f64()
    );
    for t in &out.tables {
        println!("tau = {}", t.tau);
        for row in &t.rows {
            let cells: Vec<String> = t
                .estimators
                .iter()
                .map(|e| format!("{e}={:.3}", row.relative[e]))
                .collect();
            println!(
                "  dgp {}: {} | IVQR rRMSE {:.4}",
                row.dgp,
                cells.join(" "),
                row.baseline_rrmse
            );
        }
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let ds = generate_dataset(
        &args.model,
        args.n,
        args.tau,
        args.seed,
        args.c0,
        args.c1,
        args.c2,
        args.c3,
        args.hetero,
        args.error_kind.as_deref(),
    )?;
    let csv = dataset_to_csv(&ds);
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() {
    ivqr_cli::init_workers();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::GenData(args) => cmd_gen_data(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
