//! The `egclmil` command line: synthetic cohorts, stain normalization,
//! patient splits, cross-validated training, evaluation, λ sweeps and
//! reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use egclmil::bagdata::{BagError, Task};
use egclmil::losses::LossMode;
use egclmil::metrics::MetricsError;
use egclmil::model::ModelError;
use egclmil::stain::StainError;
use egclmil::train::TrainError;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod log;

pub use log::Logger;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("refusing to write into non-empty {}; pass --force to replace it", .0.display())]
    Exists(PathBuf),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<BagError> for CliError {
    fn from(e: BagError) -> Self {
        match e {
            BagError::SyntheticSpec { .. } | BagError::UnknownClassName(_) | BagError::NoFineLabel => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Split(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::InputDim { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<StainError> for CliError {
    fn from(e: StainError) -> Self {
        match e {
            StainError::InvalidBasis(_) | StainError::Json(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    let n: u8 = s.parse().map_err(|_| format!("task must be 2, 3, 6 or 7, got {s:?}"))?;
    Task::try_from(n)
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Parser)]
#[command(name = "egclmil", version, about = "Contrastive attention-MIL experiments on patch-embedding bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort from a JSON spec.
    Synth(SynthArgs),
    /// Macenko-normalize a directory of PPM patches.
    Stain(StainArgs),
    /// Write a patient-stratified k-fold plan.
    Split(SplitArgs),
    /// Cross-validated training run.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort.
    Eval(EvalArgs),
    /// Repeated cross-validation over a λ grid and loss modes.
    Sweep(SweepArgs),
    /// Re-emit report tables from a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct StainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One basis from all patches instead of one per patch.
    #[arg(long)]
    pub pooled: bool,
    /// Target basis JSON; the built-in reference otherwise.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "7")]
    pub task: Task,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Flags shared by `train` and `sweep` that replace config entries.
#[derive(Debug, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Replaces `paths.runs_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = default_jobs())]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub mode: Option<LossMode>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cohort manifest.
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "7")]
    pub task: Task,
    /// Split plan; with `--fold`, evaluates that fold's test patients.
    #[arg(long, requires = "fold")]
    pub split: Option<PathBuf>,
    #[arg(long, requires = "split")]
    pub fold: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Comma-separated λ values.
    #[arg(long)]
    pub grid: String,
    /// Comma-separated loss modes.
    #[arg(long, default_value = "cl,egcl")]
    pub modes: String,
    /// Seeds per grid point, counting up from the run seed.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
    Both,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Both)]
    pub format: FormatArg,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli, log: &Logger) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a, log),
        Command::Stain(a) => commands::stain(&a, log),
        Command::Split(a) => commands::split(&a, log),
        Command::Train(a) => commands::train(&a, log).map(|_| ()),
        Command::Eval(a) => commands::eval(&a, log),
        Command::Sweep(a) => commands::sweep(&a, log),
        Command::Report(a) => commands::report(&a, log),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I, log: &Logger) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli, log)
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let result = Logger::from_env().and_then(|log| run(cli, &log));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("egclmil: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
