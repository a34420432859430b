//! Command-line surface: `modguard scan|eval|train-toy|bench`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Environment variable consulted for a config file when `--config` is not
/// given.
pub const CONFIG_ENV_VAR: &str = "MODGUARD_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "modguard",
    version,
    about = "On-device style NSFW moderation: scan galleries, evaluate against manifests, \
             demonstrate the precision/recall dial and benchmark the pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a directory of images and write a verdict report.
    Scan(ScanArgs),
    /// Compute evaluation metrics for a report against a manifest.
    Eval(EvalArgs),
    /// Train toy heads across an NSFW beta sweep and emit the metric table.
    TrainToy(TrainToyArgs),
    /// Measure per-stage pipeline latency.
    Bench(BenchArgs),
}

/// Model/backend and threshold flags shared by scan, eval and bench.
/// Precedence per field: CLI flag > config file > built-in default.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Detector backend: synthetic:<seed> or recorded:<dir>.
    #[arg(long, default_value = "synthetic:0")]
    pub detector: String,

    /// Classifier backend: synthetic:<seed> or recorded:<dir>.
    #[arg(long, default_value = "synthetic:0")]
    pub classifier: String,

    /// Classifier head width: 81 (multi-label) or 2 (binary).
    #[arg(long, default_value_t = 81)]
    pub classifier_classes: usize,

    /// Anchor grid JSON file; omitted means the built-in default grid.
    #[arg(long)]
    pub anchors: Option<PathBuf>,

    /// Pipeline config JSON file (falls back to $MODGUARD_CONFIG).
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub person_score_min: Option<f32>,

    #[arg(long)]
    pub unsafe_part_min: Option<f32>,

    #[arg(long)]
    pub nsfw_score_min: Option<f32>,

    #[arg(long)]
    pub crop_margin: Option<f32>,

    #[arg(long)]
    pub many_people_cutoff: Option<usize>,

    #[arg(long)]
    pub nms_iou_threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Directory of PNG/JPEG images to scan.
    pub dir: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Worker threads for the scan.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,

    /// Where to write the JSON report (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Stream one JSON line per image to stdout while scanning.
    #[arg(long)]
    pub stream: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Existing scan report to evaluate.
    #[arg(long, required_unless_present = "dir")]
    pub report: Option<PathBuf>,

    /// Scan this directory live instead of reading a report.
    #[arg(long)]
    pub dir: Option<PathBuf>,

    /// Ground-truth manifest (JSON lines: {path, label, boxes?}).
    #[arg(long)]
    pub manifest: PathBuf,

    /// Where to write the metrics JSON (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Comma-separated NSFW beta values to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1.0,2.0")]
    pub beta_nsfw: Vec<f64>,

    /// Seed for the dataset generator and training.
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,

    /// Samples per class in the synthetic dataset.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,

    /// Training epochs per head.
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,

    /// Where to write the CSV table (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Image file or directory to benchmark on.
    pub images: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Measurement iterations over the image set.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,

    /// Also write the stats as JSON to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
