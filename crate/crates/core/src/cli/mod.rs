//! `steerkit` command line. JSON results go to stdout, logs and summaries to stderr.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 data/format/io error,
//! 3 numerical failure.

mod commands;

use crate::error::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "steerkit", version, about = "Train, steer and evaluate equivariant image embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes dataset to PNG files.
    GenData(GenDataArgs),
    /// Train an equivariant or invariant model and write a checkpoint.
    Train(TrainArgs),
    /// Fit steer maps against the frozen encoder of a checkpoint.
    FitMaps(FitMapsArgs),
    /// Mean equivariance measure ρ of a checkpoint's map on the eval split.
    MeasureRho(RhoArgs),
    /// Linear probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Embed the eval split and save a retrieval index.
    Index(IndexArgs),
    /// Nearest neighbors of one steered query.
    Retrieve(RetrieveArgs),
    /// Mean reciprocal rank on a retrieval suite.
    Mrr(MrrArgs),
    /// OOD detection with test-time augmentation.
    Ood(OodArgs),
    /// Time latent against input-space test-time augmentation.
    BenchTta(BenchArgs),
    /// Train one equivariant model per (α, β) pair.
    Sweep(SweepArgs),
    /// Serve the HTTP API over a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Checkpoint file.
    #[arg(short = 'c', long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory; gets train/ and eval/ with PNGs and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with shapes dataset fields (n_train, n_eval, seed, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training images [default: 5000].
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Eval images [default: 1000].
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Options shared by `train` and `sweep`. Unset flags keep the config file value,
/// which in turn defaults to the desk-scale recipe.
#[derive(Debug, Args)]
pub struct TrainOptions {
    /// TOML file whose keys mirror the training config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss preset: main (α=0.1, β=0.1), ablation (α=1, β=0.1) or invariant (α=β=0).
    #[arg(long)]
    pub preset: Option<String>,
    /// Uniformity temperature τ [default: 1.0 on the unit sphere; 0.1 is the value for raw embeddings].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Apply the uniformity term to raw embeddings instead of the unit sphere [default: off].
    #[arg(long)]
    pub raw_uniformity: bool,
    /// Weight decay λ [default: 1e-4].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Epochs [default: 40].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 128].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 0.05].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup epochs [default: 3].
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Global gradient-norm clip, 0 disables [default: 5].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Seed for initialization, batching and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated augmentation kinds with an extra view [default: geo,photo].
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    /// Also feed an augmented view to the cross-entropy term [default: off].
    #[arg(long)]
    pub ce_augment: bool,
    /// Shapes training images [default: 5000].
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Shapes eval images [default: 1000].
    #[arg(long)]
    pub n_eval: Option<usize>,
    /// Train on CIFAR-10 binary batches from this directory instead of shapes.
    #[arg(long)]
    pub cifar: Option<PathBuf>,
    /// Write per-step JSON log lines here instead of stderr.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// equivariant or invariant [default: equivariant].
    #[arg(long)]
    pub model: Option<String>,
    /// Equivariance weight α [default: 0.1; the ablation preset uses 1.0].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Uniformity weight β [default: 0.1].
    #[arg(long)]
    pub beta: Option<f64>,
    #[command(flatten)]
    pub opts: TrainOptions,
}

#[derive(Debug, Args)]
pub struct FitMapsArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Where to write the updated checkpoint [default: overwrite the input].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with fitting fields (epochs, batch_size, base_lr, views_per_image, clip_norm, seed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated kinds to fit [default: the kinds the checkpoint was trained with].
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    /// Fitting epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.01].
    #[arg(long)]
    pub lr: Option<f64>,
    /// θ draws per training image [default: 2].
    #[arg(long)]
    pub views: Option<usize>,
    /// Seed for θ draws and batching [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace maps that were trained jointly with the encoder.
    #[arg(long)]
    pub replace: bool,
}

#[derive(Debug, Args)]
pub struct RhoArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// geo, photo or rot.
    #[arg(long)]
    pub kind: String,
    /// Eval images to sample.
    #[arg(long, default_value_t = 500)]
    pub n_samples: usize,
    /// Non-identity θ draws per image.
    #[arg(long, default_value_t = 4)]
    pub n_theta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// class (class_label) or color (aux_color_label).
    #[arg(long)]
    pub target: String,
    /// Full-batch gradient steps.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Permute the training labels (chance-level baseline).
    #[arg(long)]
    pub shuffle_labels: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Prebuilt index; without it the eval split is embedded on the fly.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Eval-split id of the query image.
    #[arg(long)]
    pub query_id: usize,
    /// raw, input-aug, map or delta.
    #[arg(long, default_value = "raw")]
    pub mode: String,
    /// Augmentation kind steered by θ (geo, photo, rot).
    #[arg(long)]
    pub kind: Option<String>,
    /// Comma-separated θ, e.g. 0.8,-0.3,-0.3 for photo.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    /// ΔM weight w_m [default: 5 for equivariant checkpoints, 1 for invariant].
    #[arg(long)]
    pub wm: Option<f64>,
    /// Neighbors to return.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct MrrArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// color, zoom, bright or color-crop.
    #[arg(long)]
    pub suite: String,
    /// raw, input-aug, map or delta.
    #[arg(long, default_value = "delta")]
    pub mode: String,
    /// ΔM weight w_m [default: 5 for equivariant checkpoints, 1 for invariant].
    #[arg(long)]
    pub wm: Option<f64>,
    /// Eval images used as queries.
    #[arg(long, default_value_t = 200)]
    pub n_images: usize,
    /// θ draws per image; each gives one key and one query.
    #[arg(long, default_value_t = 5)]
    pub n_theta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// gaussian_noise, shot_noise, brightness, contrast, pixelate or box_blur.
    #[arg(long, default_value = "gaussian_noise")]
    pub corruption: String,
    /// Severity 1 to 5.
    #[arg(long, default_value_t = 3)]
    pub severity: u8,
    /// Comma-separated view counts.
    #[arg(long, value_delimiter = ',', default_value = "1,60")]
    pub augs: Vec<usize>,
    /// latent or input.
    #[arg(long, default_value = "latent")]
    pub mode: String,
    /// Augmentation kind for the views.
    #[arg(long, default_value = "geo")]
    pub kind: String,
    /// Eval images; each also appears corrupted.
    #[arg(long, default_value_t = 500)]
    pub n_images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write pr_n<N>.csv (threshold, precision, recall) per view count here.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    #[arg(long, default_value_t = 60)]
    pub augs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value = "geo")]
    pub kind: String,
    /// Timed repetitions after one warmup; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated α values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alpha: Vec<f64>,
    /// Comma-separated β values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub beta: Vec<f64>,
    /// Directory for one checkpoint per pair.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Eval images for ρ per run.
    #[arg(long, default_value_t = 200)]
    pub rho_samples: usize,
    #[command(flatten)]
    pub opts: TrainOptions,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Prebuilt index; without it the eval split is embedded at startup.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Reads a TOML file into `T`, rejecting unknown keys.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string().trim_end().to_string()))
}

/// Parses `args` and runs the command, writing JSON results to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    commands::dispatch(cli.command, out)
}

/// Full entry point: returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
