//! `krtexas`: fit, predict and simulate from the command line.
//!
//! Exit codes: 0 on success, 2 for invalid arguments or input files, 3 when
//! the numerical search fails, 1 for anything else (for example an
//! unwritable output directory).

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use krtexas_core::io::{self, FitResult, IoError};
use krtexas_core::model::{fit, predict_aggregated, FitError, KrTexasConfig};
use krtexas_core::optim::{InitStrategy, ALL_STRATEGIES};
use krtexas_core::pilot::{DerivativeMethod, Distance};
use krtexas_core::select::LambdaGrid;
use krtexas_core::sim::{self, Covariance, Method, SimConfig, SimError, Setting};

use manifest::{InputDigest, RunManifest};

/// Environment variable that sets the worker count when `--threads` is absent.
const THREADS_ENV: &str = "KRTEXAS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "krtexas", version, about = "Kernel regression over tree-aggregated features")]
struct Cli {
    /// Worker threads (default: KRTEXAS_THREADS, else all cores). Results do
    /// not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the estimator and write result.json, weights.csv, cv_table.csv and manifest.json.
    Fit(FitArgs),
    /// Predict at new covariate rows from a previous fit.
    Predict(PredictArgs),
    /// Run the simulation benchmark and write metrics.csv and manifest.json.
    Simulate(SimulateArgs),
}

/// Estimator settings. Unset flags keep the value from `--config` or the
/// built-in default shown in brackets.
#[derive(Debug, Args, Clone)]
struct TuningArgs {
    /// JSON file holding a full configuration, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cross-validation folds [5].
    #[arg(long)]
    nfolds: Option<usize>,
    /// Penalty levels in the automatic grid [10].
    #[arg(long)]
    nlambda: Option<usize>,
    /// Smallest over largest penalty in the automatic grid [1e-5].
    #[arg(long)]
    lambda_ratio: Option<f64>,
    /// Explicit comma-separated penalty grid; overrides the automatic grid.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Fixed penalty level; skips cross-validation.
    #[arg(long)]
    lambda: Option<f64>,
    /// Optimizer tolerance [1e-6].
    #[arg(long)]
    eps: Option<f64>,
    /// Optimizer iteration cap per start [500].
    #[arg(long)]
    max_iter: Option<usize>,
    /// Stored curvature pairs in the quasi-Newton updates [10].
    #[arg(long)]
    memory: Option<usize>,
    /// Random starts for the pilot leaf bandwidth [30].
    #[arg(long)]
    restarts_stage1: Option<usize>,
    /// Random starts per cross-validation cell and for the final fit [30].
    #[arg(long)]
    restarts_stage2: Option<usize>,
    /// Extra attempts when final-fit starts fail to converge [10].
    #[arg(long)]
    max_attempts_stage3: Option<usize>,
    /// Comma-separated restart budgets compared by cross-validation [R/3, 2R/3, R].
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    /// Disable warm starts along the penalty path.
    #[arg(long)]
    no_warm_start: bool,
    /// Pilot derivative estimator: llr, lqr or nw_ml [llr].
    #[arg(long)]
    method: Option<DerivativeMethod>,
    /// Norm used for the derivative spread terms: l1 or l2 [l2].
    #[arg(long)]
    distance: Option<Distance>,
    /// Start-point distribution: smallest, small, large, or mixed to cycle
    /// through all three [mixed].
    #[arg(long)]
    gamma_init: Option<String>,
    /// Exponent applied to the leaf bandwidth to oversmooth the pilot [0.75].
    #[arg(long)]
    oversmooth: Option<f64>,
    /// Fraction of points kept as interior points [0.1].
    #[arg(long)]
    interior_fraction: Option<f64>,
    /// Exponent on the derivative spread term [1 / (2 (2 + p))].
    #[arg(long)]
    a2: Option<f64>,
    /// Exponent on the sibling gap term [1].
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Covariates: header of leaf names, one row per observation.
    #[arg(long)]
    x: PathBuf,
    /// Response: one column with a header.
    #[arg(long)]
    y: PathBuf,
    /// Tree in parent-list or membership-matrix format.
    #[arg(long)]
    tree: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tuning: TuningArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// result.json from `krtexas fit`.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    /// Training covariates used for the fit.
    #[arg(long)]
    x: PathBuf,
    /// Training response used for the fit.
    #[arg(long)]
    y: PathBuf,
    /// Rows to predict at; same header as the training covariates.
    #[arg(long)]
    x_new: PathBuf,
    /// Output CSV with columns `prediction,fallback`.
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value = "nonlinear1")]
    setting: Setting,
    /// Covariate correlation: id, toeplitz or tridiag.
    #[arg(long, default_value = "id")]
    cov: Covariance,
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Number of leaves; must be a power of two.
    #[arg(long, default_value_t = 128)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated methods: krtexas, nw, nw-ax, nw-oracle, krtexas-oracle, mean.
    #[arg(long, value_delimiter = ',', default_value = "krtexas,nw,nw-ax,nw-oracle,krtexas-oracle")]
    methods: Vec<Method>,
    /// Noise standard deviation as a multiple of the signal's.
    #[arg(long, default_value_t = 0.01)]
    noise_scale: f64,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    /// Random starts for the oracle bandwidth search [same as --restarts-stage2].
    #[arg(long)]
    oracle_restarts: Option<usize>,
    /// Only write the generated data sets, without fitting anything.
    #[arg(long)]
    skip_fit: bool,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    tuning: TuningArgs,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error(transparent)]
    Input(IoError),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Input(_) => 2,
            CliError::Optimization(_) => 3,
            CliError::Output(_) => 1,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        if e.is_optimization_failure() {
            CliError::Optimization(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Fit(f) => f.into(),
            SimError::Optim(o) => CliError::Optimization(o.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn output_err(e: IoError) -> CliError {
    CliError::Output(e.to_string())
}

fn parse_strategies(s: &str) -> Result<Vec<InitStrategy>, CliError> {
    if s.eq_ignore_ascii_case("mixed") {
        return Ok(ALL_STRATEGIES.to_vec());
    }
    s.split(',').map(|t| t.trim().parse::<InitStrategy>().map_err(CliError::Validation)).collect()
}

/// Starting configuration from `--config`, which may be a bare configuration
/// or a manifest whose `config` field holds one.
fn base_config<T: for<'de> serde::Deserialize<'de> + Default>(path: Option<&Path>, key: &str) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let value: serde_json::Value = io::read_json(path).map_err(CliError::Input)?;
    let inner = match value.get("config") {
        Some(c) if value.get("command").is_some() => c.get(key).cloned().unwrap_or_else(|| c.clone()),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

impl TuningArgs {
    fn apply(&self, mut c: KrTexasConfig) -> Result<KrTexasConfig, CliError> {
        if let Some(v) = self.nfolds {
            c.select.nfolds = v;
        }
        if let Some(values) = &self.lambda_grid {
            c.select.lambda_grid = LambdaGrid::Explicit { values: values.clone() };
        } else if self.nlambda.is_some() || self.lambda_ratio.is_some() {
            let (mut nlambda, mut ratio) = match c.select.lambda_grid {
                LambdaGrid::Auto { nlambda, ratio } => (nlambda, ratio),
                _ => match LambdaGrid::default() {
                    LambdaGrid::Auto { nlambda, ratio } => (nlambda, ratio),
                    _ => unreachable!("the default grid is automatic"),
                },
            };
            nlambda = self.nlambda.unwrap_or(nlambda);
            ratio = self.lambda_ratio.unwrap_or(ratio);
            c.select.lambda_grid = LambdaGrid::Auto { nlambda, ratio };
        }
        if self.lambda.is_some() {
            c.lambda = self.lambda;
        }
        if let Some(v) = self.eps {
            c.optimizer.eps = v;
        }
        if let Some(v) = self.max_iter {
            c.optimizer.max_iterations = v;
        }
        if let Some(v) = self.memory {
            c.optimizer.memory = v;
        }
        if let Some(v) = self.restarts_stage1 {
            c.pilot.restarts = v;
        }
        if let Some(v) = self.restarts_stage2 {
            c.select.restarts = v;
        }
        if let Some(v) = self.max_attempts_stage3 {
            c.select.max_attempts_stage_3 = v;
        }
        if let Some(b) = &self.budgets {
            c.select.budgets = Some(b.clone());
        }
        if self.no_warm_start {
            c.select.warm_start = false;
        }
        if let Some(v) = self.method {
            c.pilot.method = v;
        }
        if let Some(v) = self.distance {
            c.pilot.distance = v;
        }
        if let Some(s) = &self.gamma_init {
            c.select.strategies = parse_strategies(s)?;
        }
        if let Some(v) = self.oversmooth {
            c.pilot.oversmooth_exponent = v;
        }
        if let Some(v) = self.interior_fraction {
            c.pilot.interior_fraction = v;
        }
        if self.a2.is_some() {
            c.pilot.a2 = self.a2;
        }
        if let Some(v) = self.b {
            c.pilot.b = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))
}

fn cmd_fit(args: &FitArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let mut config = args.tuning.apply(base_config(args.tuning.config.as_deref(), "krtexas")?)?;
    config.optimizer.seed = args.seed;
    let tree = io::read_tree(&args.tree).map_err(CliError::Input)?;
    let x = io::read_covariates(&args.x, &tree).map_err(CliError::Input)?;
    let y = io::read_response(&args.y).map_err(CliError::Input)?;
    if x.nrows() != y.len() {
        return Err(CliError::Validation(format!(
            "{} has {} rows but {} has {}",
            args.x.display(),
            x.nrows(),
            args.y.display(),
            y.len()
        )));
    }
    let load_secs = start.elapsed().as_secs_f64();
    let model = fit(&tree, x.view(), &y, &config)?;
    log::info!("selected {:?}", model.selected_names());

    ensure_dir(&args.out)?;
    let result = FitResult::from_model(&model);
    io::write_json(&args.out.join("result.json"), &result).map_err(output_err)?;
    io::write_weights(&args.out.join("weights.csv"), &result.weights).map_err(output_err)?;
    io::write_cv_table(&args.out.join("cv_table.csv"), &result.cv_table).map_err(output_err)?;

    let mut timings = vec![("load".to_string(), load_secs)];
    timings.extend(model.timings.iter().cloned());
    timings.push(("total".to_string(), start.elapsed().as_secs_f64()));
    let manifest = RunManifest::new(
        "fit",
        serde_json::json!({ "krtexas": config }),
        args.seed,
        threads,
        vec![
            InputDigest::of("x", &args.x)?,
            InputDigest::of("y", &args.y)?,
            InputDigest::of("tree", &args.tree)?,
        ],
        timings,
    );
    manifest.write(&args.out.join("manifest.json"))
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let result: FitResult = io::read_json(&args.result).map_err(CliError::Input)?;
    let tree = io::read_tree(&args.tree).map_err(CliError::Input)?;
    let gamma = result
        .gamma_for(&tree)
        .map_err(|e| CliError::Validation(format!("{} does not match {}: {e}", args.result.display(), args.tree.display())))?;
    let x = io::read_covariates(&args.x, &tree).map_err(CliError::Input)?;
    let y = io::read_response(&args.y).map_err(CliError::Input)?;
    if x.nrows() != y.len() {
        return Err(CliError::Validation(format!(
            "{} has {} rows but {} has {}",
            args.x.display(),
            x.nrows(),
            args.y.display(),
            y.len()
        )));
    }
    let x_new = io::read_covariates(&args.x_new, &tree).map_err(CliError::Input)?;
    let xa = tree.aggregate(x.view()).map_err(|e| CliError::Validation(e.to_string()))?;
    let qa = tree.aggregate(x_new.view()).map_err(|e| CliError::Validation(e.to_string()))?;
    let pred = predict_aggregated(xa.view(), &y, &gamma, qa.view())?;
    let fallback_rows: Vec<usize> = (0..pred.fallback.len()).filter(|&i| pred.fallback[i]).collect();
    if !fallback_rows.is_empty() {
        log::warn!(
            "{} rows had no kernel weight and were given the training mean (1-based data rows {:?})",
            fallback_rows.len(),
            fallback_rows.iter().map(|i| i + 1).collect::<Vec<_>>()
        );
    }
    io::write_predictions(&args.out, &pred.values, &pred.fallback).map_err(output_err)
}

fn cmd_simulate(args: &SimulateArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let base: SimConfig = base_config(args.tuning.config.as_deref(), "simulation")?;
    let krtexas = args.tuning.apply(base.krtexas.clone())?;
    let config = SimConfig {
        n: args.n,
        p: args.p,
        covariance: args.cov,
        setting: args.setting,
        noise_scale: args.noise_scale,
        n_test: args.n_test,
        replicates: args.reps,
        seed: args.seed,
        methods: args.methods.clone(),
        oracle_restarts: args.oracle_restarts.unwrap_or(krtexas.select.restarts),
        krtexas,
    };
    config.validate()?;
    ensure_dir(&args.out)?;
    let tree = sim::build_full_binary_tree(config.p)?;
    let truth = sim::GroundTruth::new(&tree, config.setting)?;
    let mut timings = Vec::new();
    if args.skip_fit {
        write_sim_data(&args.out, &config, &tree, &truth)?;
        timings.push(("generate".to_string(), start.elapsed().as_secs_f64()));
    } else {
        let experiment = sim::run_experiment(&config)?;
        io::write_metrics(&args.out.join("metrics.csv"), &experiment.rows).map_err(output_err)?;
        timings.push(("experiment".to_string(), start.elapsed().as_secs_f64()));
    }
    let manifest = RunManifest::new(
        "simulate",
        serde_json::json!({ "simulation": config, "skip_fit": args.skip_fit }),
        args.seed,
        threads,
        Vec::new(),
        timings,
    )
    .with_truth(
        truth.target_set.iter().map(|&v| tree.name(v).to_string()).collect(),
        sim::describe_layout(&truth.layout),
    );
    manifest.write(&args.out.join("manifest.json"))
}

/// Writes the tree, each replicate's training and test data, and the test-set
/// conditional means for use by other tools.
fn write_sim_data(
    out: &Path,
    config: &SimConfig,
    tree: &krtexas_core::AggregationTree,
    truth: &sim::GroundTruth,
) -> Result<(), CliError> {
    io::write_tree(&out.join("tree.csv"), tree).map_err(output_err)?;
    let leaves = tree.leaf_names();
    for r in 0..config.replicates {
        let data = sim::generate(config, truth, r)?;
        let file = |stem: &str| out.join(format!("rep{r}_{stem}.csv"));
        io::write_matrix(&file("x"), &leaves, &data.x).map_err(output_err)?;
        io::write_response(&file("y"), "y", &data.y).map_err(output_err)?;
        io::write_response(&file("mean"), "mean", &data.mean).map_err(output_err)?;
        io::write_matrix(&file("x_test"), &leaves, &data.x_test).map_err(output_err)?;
        io::write_response(&file("mean_test"), "mean", &data.mean_test).map_err(output_err)?;
    }
    Ok(())
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    let requested = match flag {
        Some(k) => Some(k),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
            ),
            _ => None,
        },
    };
    match requested {
        Some(0) => Err(CliError::Validation("thread count must be at least 1".into())),
        Some(k) => Ok(k),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = resolve_threads(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Output(format!("cannot start worker pool: {e}")))?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, threads),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
