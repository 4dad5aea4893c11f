use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use myops::model::ScenarioName;
use myops::study_io::SequenceId;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "myops",
    version,
    about = "Myocardial scar and edema segmentation from multi-sequence cardiac MR"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset with train/val/test splits.
    Phantom(PhantomArgs),
    /// Train a network and write its checkpoint and step log.
    Train(TrainArgs),
    /// Score a checkpoint or stored predictions against ground truth.
    Eval(EvalArgs),
    /// Write predicted label volumes and PNG overlays.
    Predict(PredictArgs),
    /// Majority-vote several checkpoints into one prediction per study.
    Ensemble(EnsembleArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub train: usize,
    #[arg(long, default_value_t = 5)]
    pub val: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Training availability mix as `full,lge_triple,mapping_quad` counts.
    #[arg(long, value_delimiter = ',')]
    pub mix: Option<Vec<usize>>,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub slices: usize,
}

/// Dataset root holding `train/`, `val/` and `test/` study directories.
#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Network input size (rows = cols); must suit the network depth.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "F")]
    pub scenario: ScenarioName,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub scales: Option<usize>,
    /// Keep labels on only the first N training studies; the rest train
    /// unlabelled.
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Refuse checkpoints trained for another scenario.
    #[arg(long)]
    pub scenario: Option<ScenarioName>,
    /// Keep scar outside predicted edema as edema instead of dropping it.
    #[arg(long)]
    pub no_repair: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(
        long,
        conflicts_with = "predictions",
        required_unless_present = "predictions"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<study>/prediction.nii.gz` volumes from `predict` or `ensemble`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence drawn under the overlays; C0 when a study lacks it.
    #[arg(long, default_value = "LGE")]
    pub overlay: SequenceId,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "LGE")]
    pub overlay: SequenceId,
}
