//! The `kflow` command line: train a field, train a Koopman model on it,
//! then sample, evaluate, benchmark and inspect. Every command is a pure
//! function of its flags and seeds.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};
use kflow::datasets::Distribution2D;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "kflow", version, about = "Koopman one-step sampling for 2D flow matching")]
pub struct Cli {
    /// Run file of `key = value` flag defaults (see README for the grammar).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a velocity field by conditional flow matching.
    TrainCfm(TrainCfmArgs),
    /// Learn an encoder and generator matrix on a frozen field.
    TrainKoopman(TrainKoopmanArgs),
    /// Draw samples from a Koopman or field checkpoint.
    Sample(SampleArgs),
    /// Kernel MMD between two point CSV files.
    EvalMmd(EvalMmdArgs),
    /// Time one-step sampling against Euler and RK4 integration.
    Bench(BenchArgs),
    /// Export the eigen-decomposition of a Koopman generator.
    Spectrum(SpectrumArgs),
    /// Paired Koopman and field trajectories from shared starting points.
    TrajCompare(TrajCompareArgs),
    /// Write samples of a built-in distribution.
    Dataset(DatasetArgs),
}

pub fn parse_dist(s: &str) -> Result<Distribution2D, String> {
    s.parse().map_err(|e: kflow::datasets::DataError| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainCfmArgs {
    #[arg(long, value_parser = parse_dist, default_value = "gauss")]
    pub prior: Distribution2D,
    #[arg(long, value_parser = parse_dist)]
    pub target: Distribution2D,
    /// Conditional path: gauss (independent pairs) or ot (matched pairs).
    #[arg(long, default_value = "ot")]
    pub path: kflow::cfm::PathKind,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Path width; defaults to 0.1 for gauss and 0.01 for ot.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of per-step losses (`step,loss`).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainKoopmanArgs {
    /// Field checkpoint from train-cfm.
    #[arg(long)]
    pub cfm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prior of the rollouts; defaults to the one recorded in the field checkpoint.
    #[arg(long, value_parser = parse_dist)]
    pub prior: Option<Distribution2D>,
    #[arg(long, default_value_t = 28)]
    pub p_learned: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Enabled loss terms with optional weights, e.g. `generator,prediction=0.5`.
    #[arg(long, default_value = "generator,consistency")]
    pub losses: String,
    /// Consistency start-time schedule: reverse, forward or random.
    #[arg(long, default_value = "reverse")]
    pub schedule: String,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_encoder: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_operator: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub init_std: f64,
    /// Training pairs: uniform (domain draws) or trajectories (rollout states).
    #[arg(long, default_value = "uniform")]
    pub source: String,
    #[arg(long, default_value_t = 20_000)]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 8.0)]
    pub half_width: f64,
    #[arg(long, default_value_t = 2048)]
    pub n_traj: usize,
    /// Halve the learning rates when the validation loss stalls.
    #[arg(long)]
    pub plateau: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional per-epoch CSV of loss components.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub n: usize,
    /// Comma-separated ascending query times in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub t: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_dist)]
    pub prior: Option<Distribution2D>,
    /// Integration steps for a field checkpoint.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Integrator for a field checkpoint: euler or rk4.
    #[arg(long, default_value = "rk4")]
    pub method: kflow::cfm::OdeMethod,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMmdArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Kernel bandwidth, or `auto` for the pooled median distance.
    #[arg(long, default_value = "auto")]
    pub bandwidth: String,
    /// Keep only rows at this time when a file has a `t` column.
    #[arg(long)]
    pub t: Option<f64>,
    /// Print the full result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub koopman: PathBuf,
    #[arg(long)]
    pub cfm: PathBuf,
    #[arg(long, value_parser = parse_dist)]
    pub prior: Option<Distribution2D>,
    #[arg(long, value_parser = parse_dist)]
    pub target: Option<Distribution2D>,
    #[arg(long, default_value_t = 2048)]
    pub n: usize,
    /// Comma-separated integrator step counts.
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
    pub steps: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value = "auto")]
    pub bandwidth: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV table (`method,steps,wall_ns,samples_per_sec,mmd`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON summary.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Rows to export; all modes when omitted.
    #[arg(long)]
    pub top: Option<usize>,
    /// Starting state `x,y` for the mode coefficients; a prior draw otherwise.
    #[arg(long)]
    pub point: Option<String>,
    #[arg(long, value_parser = parse_dist)]
    pub prior: Option<Distribution2D>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrajCompareArgs {
    #[arg(long)]
    pub koopman: PathBuf,
    #[arg(long)]
    pub cfm: PathBuf,
    #[arg(long, value_parser = parse_dist)]
    pub prior: Option<Distribution2D>,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, value_parser = parse_dist)]
    pub dist: Distribution2D,
    #[arg(long, default_value_t = 2048)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Sizes the global worker pool from `KFLOW_THREADS` when it is set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("KFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("KFLOW_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("KFLOW_THREADS: {e}")))
}

/// Parses `argv` (config file included) and runs the command. Clap's own
/// errors, help and version output are returned as `Err(clap::Error)`.
pub fn run(argv: Vec<OsString>) -> Result<Result<(), CliError>, clap::Error> {
    let root = Cli::command();
    let argv = match config::expand_argv(argv, &root) {
        Ok(a) => a,
        Err(e) => return Ok(Err(e)),
    };
    let cli = Cli::try_parse_from(argv)?;
    Ok(configure_threads().and_then(|_| commands::dispatch(cli.command)))
}
