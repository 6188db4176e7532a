use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use nrmkit::dependency_ops::OpsError;
use nrmkit::levy_core::LevyError;
use nrmkit::moments::MomentError;
use nrmkit::ngg_posterior::PosteriorError;
use nrmkit::slice_sampler::SliceError;
use nrmkit::tak::TakError;

mod commands;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "nrmkit", version, about = "Normalized generalized gamma random measures")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Shape a in (0, 1)
    #[arg(long, global = true)]
    pub a: Option<f64>,
    /// Total mass M > 0
    #[arg(long, global = true)]
    pub mass: Option<f64>,
    /// Random seed; 1 when absent
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (a file prefix for `powerlaw`); stdout when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel replicates; all cores when absent
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl Common {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a completely random measure and its normalization
    Sample(SampleArgs),
    /// Run the slice sampler on a data file
    Fit(FitArgs),
    /// Cluster-count growth and cluster-size counts of sequential samples
    Powerlaw(PowerlawArgs),
    /// Moments and covariances by formula, quadrature and Monte Carlo
    Moments(MomentsArgs),
    /// Table of the normalizing integrals T^{N,K}
    Tak(TakArgs),
    /// Normal form and evaluation of an operator expression
    Algebra(AlgebraArgs),
    /// Cross-method verification suites
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Decreasing,
    Threshold,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long, value_enum, default_value_t = Construction::Threshold)]
    pub construction: Construction,
    /// Number of jumps for the decreasing construction
    #[arg(long, default_value_t = 100)]
    pub kmax: usize,
    /// Truncation level for the threshold construction
    #[arg(long, default_value_t = 0.01)]
    pub z: f64,
    #[arg(long, value_enum, default_value_t = Base::Uniform)]
    pub base: Base,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Headerless CSV, one observation per row
    #[arg(long)]
    pub data: PathBuf,
    /// TOML key-value file (a, M or M_shape/M_rate, iterations, burn_in,
    /// thin, seed, model, obs_sd, prior_mean, prior_sd, proposal_sd)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sweeps after burn-in; overrides the config file
    #[arg(long)]
    pub iters: Option<usize>,
    /// Discarded initial sweeps; overrides the config file
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Record every thin-th sweep after burn-in; overrides the config file
    #[arg(long)]
    pub thin: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PowerlawArgs {
    /// Items per run
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Log-spaced rows per decade in the growth table
    #[arg(long, default_value_t = 20)]
    pub per_decade: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    Mean,
    Var,
    Super,
    Sub,
    Trans,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    Ngg,
    Dp,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MomentsArgs {
    #[arg(long, value_enum)]
    pub op: MomentKind,
    #[arg(long, value_enum, default_value_t = FamilyArg::Ngg)]
    pub family: FamilyArg,
    /// Base probability of the set B
    #[arg(long)]
    pub pb: f64,
    /// Base probability of the set A (transition covariance)
    #[arg(long)]
    pub pa: Option<f64>,
    /// Thinning probability (subsampling covariance)
    #[arg(long)]
    pub q: Option<f64>,
    /// Component masses of a superposition, comma separated
    #[arg(long, value_delimiter = ',')]
    pub masses: Option<Vec<f64>>,
    /// Index of the superposition component paired with the sum
    #[arg(long, default_value_t = 0)]
    pub k: usize,
    /// Monte Carlo replicates
    #[arg(long)]
    pub mc: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TakArgs {
    #[arg(long, default_value_t = 30)]
    pub n_max: usize,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Print only these cells, given as N,K (repeatable)
    #[arg(long)]
    pub cell: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AlgebraArgs {
    /// Prefix expression, e.g. "(superpose (subsample 0.5 (leaf m1)) (leaf m2))"
    pub expr: String,
    /// Sample the leaves and evaluate the expression
    #[arg(long)]
    pub evaluate: bool,
    /// Truncation level of the sampled leaves
    #[arg(long, default_value_t = 1e-3)]
    pub z: f64,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    /// Restrict to these suites (tak, partition, predictive, pdp, moments, geweke)
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("verification failed")]
    VerifyFailed,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::VerifyFailed => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Numerical(format!("serialization: {e}"))
    }
}

impl From<LevyError> for CliError {
    fn from(e: LevyError) -> Self {
        match e {
            LevyError::InvalidParameter(_) | LevyError::Dimension { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SliceError> for CliError {
    fn from(e: SliceError) -> Self {
        match e {
            SliceError::Config(_) | SliceError::Data(_) => CliError::Config(e.to_string()),
            SliceError::Levy(l) => l.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OpsError> for CliError {
    fn from(e: OpsError) -> Self {
        match e {
            OpsError::Levy(l) => l.into(),
            OpsError::Quadrature(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MomentError> for CliError {
    fn from(e: MomentError) -> Self {
        match e {
            MomentError::InvalidQuery(_) => CliError::Config(e.to_string()),
            MomentError::Levy(l) => l.into(),
            MomentError::Ops(o) => o.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TakError> for CliError {
    fn from(e: TakError) -> Self {
        match e {
            TakError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PosteriorError> for CliError {
    fn from(e: PosteriorError) -> Self {
        match e {
            PosteriorError::Partition(_) | PosteriorError::InvalidArgument(_) => CliError::Config(e.to_string()),
            PosteriorError::Levy(l) => l.into(),
            PosteriorError::Tak(t) => t.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

/// Provenance embedded in every artifact.
#[derive(Debug, Serialize)]
pub struct Meta<'a, C: Serialize> {
    pub version: &'static str,
    pub seed: u64,
    pub config: &'a C,
}

/// Full configuration of a run: the common flags and the subcommand's own.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, S: Serialize> {
    pub subcommand: &'static str,
    #[serde(flatten)]
    pub common: &'a Common,
    pub args: &'a S,
}

pub fn open_out(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| {
                CliError::Config(format!("cannot create {}: {e}", p.display()))
            })?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::Sample(a) => commands::sample(c, a),
        Command::Fit(a) => commands::fit(c, a),
        Command::Powerlaw(a) => commands::powerlaw(c, a),
        Command::Moments(a) => commands::moments(c, a),
        Command::Tak(a) => commands::tak(c, a),
        Command::Algebra(a) => commands::algebra(c, a),
        Command::Verify(a) => commands::verify(c, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NRMKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::VerifyFailed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
