use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use forkfield::engine::MergeStrategy;

#[derive(Debug, Parser)]
#[command(
    name = "forkfield",
    version,
    about = "Synthetic composite-field detection with fork-normalized multi-task training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split.
    Generate(GenerateArgs),
    /// Train a network on a dataset and write a checkpoint and a per-epoch log.
    Train(TrainArgs),
    /// Decode every scene of a dataset with a checkpoint.
    Decode(DecodeArgs),
    /// Evaluate decoded detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Measure backbone and head gradient norms against the number of tasks.
    GradStudy(GradStudyArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the run seed and the generator seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides `output`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of scenes (overrides `scenes`).
    #[arg(long, value_name = "N")]
    pub scenes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or manifest.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Merge strategy, e.g. `accumulation`, `fork-power` or `fork-power:0.3`.
    #[arg(long, value_name = "NAME")]
    pub strategy: Option<MergeStrategy>,
    /// Canonical attribute set size to train on.
    #[arg(long, value_name = "A")]
    pub tasks: Option<usize>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory or manifest.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Decode with the exponential moving average of the weights.
    #[arg(long)]
    pub ema: bool,
    /// Confidence threshold (overrides `decode.gamma`).
    #[arg(long, value_name = "G")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `decode`.
    #[arg(long, value_name = "DIR")]
    pub detections: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Training split whose majority classes back unmatched ground truths.
    #[arg(long, value_name = "DIR")]
    pub train_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradStudyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated attribute set sizes (overrides `study.attribute_sets`).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub tasks: Vec<usize>,
    /// Comma-separated strategies (overrides `study.strategies`).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub strategy: Vec<MergeStrategy>,
    /// Epochs averaged per cell (overrides `study.epochs`).
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Seeds per cell (overrides `study.seeds`).
    #[arg(long, value_name = "N")]
    pub seeds: Option<usize>,
    /// Run cells on a thread pool; results are identical to a sequential run.
    #[arg(long)]
    pub parallel: bool,
    /// Worker threads for `--parallel`; all cores when unset.
    #[arg(long, value_name = "N", env = "FORKFIELD_THREADS")]
    pub threads: Option<usize>,
}
