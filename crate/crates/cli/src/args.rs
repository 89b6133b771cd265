use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mchmm", version, about = "Exposed-infected epidemic estimation from isolation counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate trajectories and their daily isolation counts.
    Simulate(SimulateArgs),
    /// Turn a stored trajectory into window counts.
    Observe(ObserveArgs),
    /// Closed-form or Monte Carlo limit moments.
    Moments(MomentsArgs),
    /// Truncated skeleton matrix and emissions for given rates.
    Skeleton(SkeletonArgs),
    /// Fit the HMM to an observation file.
    Fit(FitCmdArgs),
    /// Fit, then recover the rates from the fitted chain's moments.
    Estimate(FitCmdArgs),
    /// Compare the one-compartment and exposed-infected models by BIC.
    Select(SelectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModelArg {
    /// One compartment (birth-death with immigration).
    #[value(name = "1")]
    Lbdi,
    /// Exposed and infected compartments.
    #[value(name = "2")]
    Exposed,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ParamArgs {
    /// JSON file with `lambda`, `mu`, `nu` and, for model 2, `alpha`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, value_enum, default_value = "2")]
    pub model: ModelArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    #[arg(long, default_value_t = 10_000.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub e0: u32,
    #[arg(long, default_value_t = 0)]
    pub i0: u32,
    /// Number of independent replicas; more than one writes numbered files.
    #[arg(long, default_value_t = 1)]
    pub replications: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ObserveArgs {
    /// Trajectory CSV written by `simulate`.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MomentsArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// Estimate the moments by simulation instead of the closed form.
    #[arg(long)]
    pub mc: bool,
    #[arg(long, default_value_t = 10_000)]
    pub n_mc: usize,
    #[arg(long, default_value_t = 10_000.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub e0: u32,
    #[arg(long, default_value_t = 0)]
    pub i0: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SkeletonMethod {
    /// Monte Carlo windows from every state.
    Mc,
    /// Master-equation transition matrix (no emissions).
    Oracle,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SkeletonArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    #[arg(long, default_value_t = 3)]
    pub trunc_n: u32,
    #[arg(long, default_value_t = 2)]
    pub trunc_m: u32,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "mc")]
    pub method: SkeletonMethod,
    /// Simulated windows per starting state.
    #[arg(long, default_value_t = 10_000)]
    pub transitions: usize,
    /// Pool windows from this many long trajectories instead of sampling
    /// every state separately.
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Windows per pooled trajectory.
    #[arg(long, default_value_t = 10_000)]
    pub windows: usize,
    /// Also run the truncated chain this many steps and report its moments.
    #[arg(long)]
    pub chain_steps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 15)]
    pub starts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 4)]
    pub trunc_n: u32,
    /// Largest count level; defaults to max(max observation, 2).
    #[arg(long)]
    pub trunc_m: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    pub chain_steps: usize,
    /// Simulated windows per state for each start's initial skeleton.
    #[arg(long, default_value_t = 10_000)]
    pub transitions: usize,
    /// Initial-draw ranges as `LO:HI`.
    #[arg(long)]
    pub init_lambda: Option<String>,
    #[arg(long)]
    pub init_mu: Option<String>,
    #[arg(long)]
    pub init_alpha: Option<String>,
    #[arg(long)]
    pub init_nu: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitCmdArgs {
    /// Observation CSV (`n,y`).
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, value_enum, default_value = "2")]
    pub model: ModelArg,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    /// Observation CSV; omit to simulate `--replications` series instead.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Generating model and rates for simulated series.
    #[command(flatten)]
    pub truth: ParamArgs,
    #[arg(long, default_value_t = 10)]
    pub replications: usize,
    #[arg(long, default_value_t = 10_000.0)]
    pub horizon: f64,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub out: OutArgs,
}
