mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eqtreat_core::data::{BinKind, DataError};
use eqtreat_core::synth::Family;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "eqtreat", version, about = "Measure, explain and mitigate unequal model calibration across groups")]
struct Cli {
    /// TOML or JSON settings for the subcommand; flags override them.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Joined {
    /// Scored dataset (.jsonl or .csv).
    #[arg(long)]
    input: PathBuf,
    /// Group file (JSONL).
    #[arg(long)]
    groups: PathBuf,
    /// Dimension to join on; required when the group file holds several.
    #[arg(long)]
    dimension: Option<String>,
}

#[derive(Debug, Args)]
struct Binning {
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = BinKind::EqualMass)]
    bin_kind: BinKind,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parity gaps, calibration curves, quality of service and group shares.
    Measure {
        #[command(flatten)]
        joined: Joined,
        #[command(flatten)]
        binning: Binning,
        /// Minimum per-group AUROC for the quality-of-service check.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The same aggregates estimated from randomized-response labels.
    DpMeasure {
        #[command(flatten)]
        joined: Joined,
        #[command(flatten)]
        binning: Binning,
        #[arg(long)]
        rho: f64,
        /// Apply randomized response (seeded by --seed) to clean labels first.
        #[arg(long)]
        apply_noise: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residual error tree and its Sankey export.
    Cohorts {
        #[command(flatten)]
        joined: Joined,
        /// Candidate features, comma separated; default is every side feature plus the dimension.
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        min_leaf: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit (or apply) a per-group calibrator and report gaps before and after.
    Mitigate {
        #[command(flatten)]
        joined: Joined,
        #[command(flatten)]
        binning: Binning,
        /// Apply this calibrator instead of fitting one.
        #[arg(long)]
        calibrator: Option<PathBuf>,
        #[arg(long)]
        min_fit_count: Option<usize>,
        /// Where the fitted calibrator is written.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where the recalibrated dataset is written (JSONL).
        #[arg(long)]
        calibrated_out: Option<PathBuf>,
    },
    /// Strategy comparison table, or the full justifiability workflow with --pipeline.
    Harness {
        #[command(flatten)]
        joined: Joined,
        /// Evaluation data; a seeded split of --input when absent.
        #[arg(long)]
        test_input: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
        #[arg(long, value_delimiter = ',')]
        baseline_features: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        superset: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        bin_kind: Option<BinKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pipeline: bool,
        /// Step log that lets an interrupted --pipeline run resume.
        #[arg(long)]
        step_log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edge-level response rates by arm and a harm verdict.
    Consequences {
        /// Edge events (JSONL).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        dimension: Option<String>,
        /// Destination group the verdict is about.
        #[arg(long)]
        protected: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explore/exploit recommender simulation; writes per-step CSV.
    Simulate {
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Minimum gap shrink (pp) below which the run is flagged.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the aggregate-only evaluation service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Group file the service holds.
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Suppression threshold for small cells.
        #[arg(long)]
        threshold: Option<usize>,
    },
    /// Deterministic synthetic datasets.
    Synth {
        #[arg(long)]
        family: Family,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Outcome log-odds shift for the outcome-shift family.
        #[arg(long)]
        shift: Option<f64>,
        /// Edges family only: write the fixed rate-table reconstruction instead.
        #[arg(long)]
        rate_table: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] eqtreat_core::parity::MetricError),
    #[error(transparent)]
    Dp(#[from] eqtreat_core::dp::DpError),
    #[error(transparent)]
    Cohort(#[from] eqtreat_core::cohort::CohortError),
    #[error(transparent)]
    Mitigation(#[from] eqtreat_core::mitigation::MitigationError),
    #[error(transparent)]
    Consequence(#[from] eqtreat_core::consequence::ConsequenceError),
    #[error(transparent)]
    Sim(#[from] eqtreat_core::sim::SimError),
    #[error(transparent)]
    Service(#[from] eqtreat_service::ServiceError),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            Self::Usage(_) => "USAGE",
            Self::Write { .. } => "IO_ERROR",
            Self::Data(e) => e.code(),
            Self::Metric(e) => e.code(),
            Self::Dp(e) => e.code(),
            Self::Cohort(e) => e.code(),
            Self::Mitigation(e) => e.code(),
            Self::Consequence(e) => e.code(),
            Self::Sim(e) => e.code(),
            Self::Service(e) => e.code(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, cli.config.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code())
        }
    }
}
