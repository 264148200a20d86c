//! Subcommand definitions and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fomemo::acquisition::{AcqKind, AcquisitionSpec};

use crate::error::{CliError, Result};

mod bench;
mod optimize;
mod posterior;
mod report;
mod train;

pub use bench::{summarize, SummaryRow, SUMMARY_HEADER};
pub use report::REPORT_HEADER;

#[derive(Debug, Parser)]
#[command(name = "fomemo", version, about = "In-context multi-objective Bayesian optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a model on synthetic GP tasks.
    Train(TrainArgs),
    /// Optimize one problem with one algorithm.
    Optimize(OptimizeArgs),
    /// Run problems × algorithms × seeds and aggregate the results.
    Bench(BenchArgs),
    /// Dump aggregation posteriors of a 1-d problem on a grid.
    Posterior(PosteriorArgs),
    /// Anytime IGD+ or HV curves for finished runs.
    Report(ReportArgs),
}

/// Acquisition optimizer knobs shared by optimize and bench.
#[derive(Debug, Clone, Args)]
pub struct AcqArgs {
    /// UCB exploration weight.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Preferences sampled per UHVI candidate.
    #[arg(long, default_value_t = 32)]
    pub pref_samples: usize,
    /// Scrambled Sobol candidates scored per proposal.
    #[arg(long, default_value_t = 1024)]
    pub pool: usize,
    /// Best pool points refined per proposal.
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    /// Perturbation rounds per restart.
    #[arg(long, default_value_t = 50)]
    pub refine_steps: usize,
}

impl AcqArgs {
    pub fn spec(&self, q: usize) -> AcquisitionSpec {
        AcquisitionSpec {
            kind: AcqKind::Ucb,
            beta: self.beta,
            n_pref_samples: self.pref_samples,
            q,
            candidate_pool: self.pool,
            restarts: self.restarts,
            refine_steps: self.refine_steps,
        }
    }
}

/// Parses `lo:hi`.
fn parse_bounds(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got `{s}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(format!("lower bound {lo} must be below upper bound {hi}"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Registered problem name or `external:<command>`.
    #[arg(long)]
    pub problem: String,
    /// Decision dimension (defaults to the problem's own).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Objective count of an external problem.
    #[arg(long)]
    pub objectives: Option<usize>,
    /// Box `lo:hi` applied to every coordinate of an external problem.
    #[arg(long, value_parser = parse_bounds)]
    pub bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the config, build the model and run a single step.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep every periodic checkpoint under `<out>/history`.
    #[arg(long)]
    pub keep_history: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// ei, ucb, uhvi, sobol or gp-parego.
    #[arg(long, default_value = "ucb")]
    pub acq: String,
    /// Evaluations after the initial design.
    #[arg(long, default_value_t = 40)]
    pub budget: usize,
    #[arg(long, default_value_t = 1)]
    pub q: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `run.jsonl` and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub acq_args: AcqArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Problem suite; `synthetic` is every registered problem.
    #[arg(long, default_value = "synthetic")]
    pub suite: String,
    /// Comma-separated problems, overriding the suite.
    #[arg(long, value_delimiter = ',')]
    pub problems: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', default_value = "ucb,sobol,gp-parego")]
    pub algos: Vec<String>,
    /// Replicates per (problem, algorithm).
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub master_seed: u64,
    #[arg(long, default_value_t = 40)]
    pub budget: usize,
    #[arg(long, default_value_t = 1)]
    pub q: usize,
    /// Worker threads; `FOMEMO_THREADS` caps this.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub acq_args: AcqArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Observations in the conditioning trajectory.
    #[arg(long, default_value_t = 5)]
    pub n_traj: usize,
    /// Preferences as `w1,w2;w1,w2;...` (default: five evenly spaced).
    #[arg(long)]
    pub preferences: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for run manifests.
    #[arg(long)]
    pub runs: PathBuf,
    /// igdplus or hv.
    #[arg(long, default_value = "igdplus")]
    pub metric: String,
    /// `analytic` or a CSV file of reference objective vectors.
    #[arg(long, default_value = "analytic")]
    pub reference: String,
    /// Seed of Monte-Carlo hypervolume estimates.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Optimize(a) => optimize::run(&a),
        Command::Bench(a) => bench::run(&a),
        Command::Posterior(a) => posterior::run(&a),
        Command::Report(a) => report::run(&a),
    }
}

fn create_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
