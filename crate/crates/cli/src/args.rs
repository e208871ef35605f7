use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sensorformer::pretrain::MaskGranularity;
use sensorformer::{Arch, Pooling, Task};

#[derive(Parser, Debug)]
#[command(name = "sensorformer", version, about = "Pretrain and fine-tune Transformers on binned sensor sequences")]
pub struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Pretrain a model with parallel bin heads.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint without updating it.
    Evaluate(EvaluateArgs),
    /// Print a report about a checkpoint or a dataset.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub windows_per_class: usize,
    #[arg(long, default_value_t = 300)]
    pub length: usize,
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Reconstruction,
    Mlm,
    NextToken,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Reconstruction => Task::Reconstruction,
            TaskArg::Mlm => Task::Mlm,
            TaskArg::NextToken => Task::NextToken,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchArg {
    Encoder,
    Decoder,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Encoder => Arch::Encoder,
            ArchArg::Decoder => Arch::Decoder,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Mean,
    First,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::First => Pooling::FirstPosition,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GranularityArg {
    Cell,
    Timestep,
}

impl From<GranularityArg> for MaskGranularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Cell => MaskGranularity::Cell,
            GranularityArg::Timestep => MaskGranularity::Timestep,
        }
    }
}

/// Architecture overrides shared by commands that build a fresh model.
#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub arch: Option<ArchArg>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Window length L.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Bins per dimension (100 and 1000 are the usual choices).
    #[arg(long)]
    pub bins: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_granularity: Option<GranularityArg>,
    #[arg(long)]
    pub next_token_skip: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub loss_csv: PathBuf,
    /// Defaults to `<out-checkpoint>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Labeled training data; also split into validation and test unless those are given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, requires = "test_data")]
    pub val_data: Option<PathBuf>,
    #[arg(long, requires = "val_data")]
    pub test_data: Option<PathBuf>,
    #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
    pub checkpoint: Option<PathBuf>,
    /// Train every parameter from a fresh initialization.
    #[arg(long)]
    pub scratch: bool,
    /// Fit a new scaler on `--data` instead of reusing the checkpoint's.
    #[arg(long)]
    pub refit_scaler: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Seeds initialization, shuffling and the split unless set separately.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    #[arg(long)]
    pub metrics_json: PathBuf,
    /// Defaults to `<metrics-json stem>.confusion.csv`.
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Defaults to `<out-checkpoint>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score only one part of the seeded random split used by `finetune`.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.6)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub metrics_json: PathBuf,
    #[arg(long)]
    pub confusion_csv: Option<PathBuf>,
    /// Defaults to `<metrics-json>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Bin count for the occupancy histogram.
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    /// Winsorization fraction used to scale data before binning.
    #[arg(long, default_value_t = sensorformer::preprocess::DEFAULT_WINSOR_FRACTION)]
    pub winsor: f64,
    /// Also write a run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
