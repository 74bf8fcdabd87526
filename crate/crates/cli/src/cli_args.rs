//! Flag definitions. Precedence everywhere: command line over config file
//! over built-in default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::imgout::ImageFormat;

#[derive(Parser)]
#[command(
    name = "aet",
    version,
    about = "Self-supervised representation learning by transformation regression",
    after_help = "Diagnostics go to stderr; results go to files or stdout.\n\
                  The AET_OUT_DIR environment variable sets the default output root."
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Pre-train an encoder by regressing sampled image transformations.
    Train(TrainArgs),
    /// Train a classifier probe on a frozen checkpoint and print its error.
    Probe(ProbeArgs),
    /// Nearest-neighbor error of pooled block-2 features.
    Knn(KnnArgs),
    /// Nearest-neighbor error over several K values.
    Sweep(SweepArgs),
    /// Write original/transformed image pairs with their target vectors.
    WarpDemo(WarpDemoArgs),
    /// Emit plain-text x/y series files from metrics (and sweep) CSVs.
    ExportPlots(ExportPlotsArgs),
    /// Print a checkpoint manifest as JSON.
    InspectCkpt(InspectArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run-config file (flat key=value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epoch count; overrides the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint written by an identical configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProbeArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Probe kind: fc_1, fc_2, fc_3, or conv.
    #[arg(long, default_value = "fc_3")]
    pub spec: String,
    /// Config file for dataset and probe hyperparameters (default: the
    /// checkpoint's own dataset).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Probe training seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct KnnArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of nearest neighbors.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Config file overriding the checkpoint's dataset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated K values.
    #[arg(long, default_value = "1,3,5,10,20")]
    pub ks: String,
    /// Optional CSV output path (header `k,knn_error`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config file overriding the checkpoint's dataset.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct WarpDemoArgs {
    /// Run-config file providing the dataset and sampling distribution.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of image pairs to write.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Seed for image and transformation draws; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Image format (png requires building with --features png).
    #[arg(long, default_value = "ppm")]
    pub format: ImageFormat,
}

#[derive(Args)]
pub struct ExportPlotsArgs {
    /// Metrics CSV written by `train`.
    #[arg(long)]
    pub metrics: PathBuf,
    /// Optional sweep CSV written by `sweep --out`.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Directory for the series files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long)]
    pub ckpt: PathBuf,
}
