use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grid_core::GridError;

mod commands;
mod config;

use config::{ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(name = "grid", version, about = "Prediction-noise defense against link stealing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic graph, train the toy model and write its posteriors.
    Generate,
    /// Select core nodes, craft their noise and write the noisy posteriors.
    Defend,
    /// Score the configured attacks before and after the defense.
    Attack,
    /// Run the defense over a range of theta or n values.
    Sweep,
    /// Re-render a saved sweep as JSON + CSV and print a summary table.
    Report {
        /// Path to a sweep.json written by `sweep`.
        #[arg(long, value_name = "PATH")]
        sweep: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for graph generation, training, sampling and the solver
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Distortion budget.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Hop distance of the disguise targets.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory holding edges.tsv, nodes.csv and predictions.csv.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Comma-separated attack names.
    #[arg(long, global = true, value_delimiter = ',')]
    attacks: Option<Vec<String>>,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or missing input (exit 2).
    Usage(String),
    /// Input data rejected by validation (exit 3).
    Data(String),
    /// A broken internal guarantee (exit 4).
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<GridError> for Failure {
    fn from(e: GridError) -> Self {
        let msg = e.to_string();
        match e {
            GridError::Io(_) | GridError::Json(_) | GridError::UnsupportedMetric(_) => Failure::Usage(msg),
            GridError::Parse { .. }
            | GridError::Validation(_)
            | GridError::TiedArgmax(_)
            | GridError::InsufficientStructure(_)
            | GridError::EmptyPairs
            | GridError::Csv(_) => Failure::Data(msg),
            GridError::Diverged(_) | GridError::Invariant(_) => Failure::Internal(msg),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRID_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = cli.common;
    let cfg = ExperimentConfig::load(c.config.as_deref())?.resolve(Overrides {
        seed: c.seed,
        theta: c.theta,
        n: c.n,
        out: c.out,
        data: c.data,
        attacks: c.attacks,
    })?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = c.workers {
        if w == 0 {
            return Err(Failure::Usage("--workers must be >= 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Internal(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Defend => commands::defend(&cfg),
        Command::Attack => commands::attack(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Report { sweep } => commands::report(&cfg, &sweep),
    })
}
