//! The `pgcert` command-line harness.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgcert_core::estimator::{EstimatorKind, Mutation};
use pgcert_core::ObjectiveKind;

pub use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(
    name = "pgcert",
    version,
    about = "Policy-gradient runs, theory constants and assumption checks"
)]
pub struct Cli {
    /// Base seed; overrides the seeds of a config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run policy-gradient ascent as described by --config.
    Run(RunArgs),
    /// Print the smoothness, variance and truncation constants of a setting.
    Constants(ConstantsArgs),
    /// Run assumption checks on an MDP.
    Verify(VerifyArgs),
    /// Run a config over a grid of values for one parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Resolve and print the config without running.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyArg {
    Softmax,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct ConstantsArgs {
    #[arg(long, value_enum, default_value = "softmax")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 1)]
    pub states: usize,
    #[arg(long, default_value_t = 2)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rmax: f64,
    #[arg(long, default_value_t = 50)]
    pub horizon: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// reinforce, gpomdp, pgt, barrier_reinforce, barrier_gpomdp or entropy.
    #[arg(long, default_value = "gpomdp")]
    pub estimator: EstimatorKind,
    /// plain, log_barrier or entropy.
    #[arg(long, default_value = "plain")]
    pub objective: ObjectiveKind,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Bound on feature norms (Gaussian policies).
    #[arg(long, default_value_t = 1.0)]
    pub feature_bound: f64,
    /// Action noise (Gaussian policies).
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Adds the iteration budget and FOSP recipe for this accuracy.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Initial suboptimality for the budget; defaults to 2 r_max / (1 - gamma).
    #[arg(long)]
    pub delta0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// A check name, `suite` or `all`.
    #[arg(default_value = "suite")]
    pub check: String,
    /// Bundled name, random:SxA[:seed] or a JSON file.
    #[arg(long, default_value = "random3")]
    pub mdp: String,
    /// Corrupt the estimators; the checks should then fail.
    #[arg(long, default_value = "none")]
    pub mutation: Mutation,
    /// Horizon of the exhaustive enumeration.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Monte-Carlo samples of the variance check.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Iterations of the exact runs behind the run-based checks.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// List the available checks and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {}

/// Runs a parsed command line and maps the outcome to an exit status:
/// 0 on success, 1 when a check fails or a run aborts, 2 for usage errors.
pub fn execute(cli: &Cli) -> ExitCode {
    match commands::dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
