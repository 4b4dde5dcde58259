//! `geofm` command-line entry point.

mod commands;
mod config;
mod data;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use geofm::ErrorCategory;

#[derive(Parser, Debug)]
#[command(name = "geofm", version, about = "Compact geospatial foundation model pipeline")]
pub struct Cli {
    /// `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every stochastic step derives its stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic datasets and the full-size raw scene.
    Fixtures(FixturesArgs),
    /// Clean, normalise and tile a raw cube.
    Ingest(IngestArgs),
    /// Threshold a spectral index into a water or cloud mask.
    Label(LabelArgs),
    /// Distil a small encoder from a larger masked autoencoder.
    PretrainDistill(DistillArgs),
    /// Train a task head on top of an encoder.
    Finetune(FinetuneArgs),
    /// Run a model over a tile dataset.
    Infer(InferArgs),
    /// Cast a model bundle to FP16.
    Quantize(QuantizeArgs),
    /// Score a model, optionally against an FP16 copy or a second domain.
    Eval(EvalArgs),
    /// Time tile-by-tile inference over a raw cube.
    Profile(ProfileArgs),
    /// Label-fraction grid over encoder/head initialisations.
    Experiment(ExperimentArgs),
    /// Collect CSV outputs into one markdown report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct FixturesArgs {
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Unlabelled cubes for pretraining.
    #[arg(long, default_value_t = 64)]
    pub pretrain: usize,
    #[arg(long, default_value_t = 48)]
    pub train: usize,
    #[arg(long, default_value_t = 16)]
    pub val: usize,
    #[arg(long, default_value_t = 64)]
    pub test: usize,
    /// Skip the 1792×2464 raw scene (about 70 MB).
    #[arg(long)]
    pub skip_scene: bool,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    pub tile: usize,
    /// `minmax` or `scale:<reflectance scale>`.
    #[arg(long, default_value = "minmax")]
    pub norm: String,
    /// Band centres (µm) to keep, nearest match within 0.05 µm.
    #[arg(long, value_delimiter = ',')]
    pub bands: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    pub cube: PathBuf,
    /// `water` or `cloud`.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "minmax")]
    pub norm: String,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Manifest of unlabelled tiles.
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained teacher autoencoder; trained from scratch when absent.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub teacher_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub student_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 200)]
    pub teacher_steps: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    /// Train the student on pixels instead of teacher reconstructions.
    #[arg(long)]
    pub plain: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Encoder bundle; a random encoder is trained jointly when absent.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Task bundle whose head initialises this one.
    #[arg(long)]
    pub init_head: Option<PathBuf>,
    /// Decoder stage width.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Random-encoder width, depth, heads and patch size.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Divides the task's full-scale epochs and batch size.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// `frozen` or `trainable`; defaults to frozen when an encoder is given.
    #[arg(long)]
    pub mode: Option<String>,
    /// `shuffle`, `weighted-1to1` or `downsample-clear`.
    #[arg(long, default_value = "shuffle")]
    pub sampling: String,
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "desk")]
    pub environment: String,
    /// FP16 bundle to compare against.
    #[arg(long)]
    pub fp16: Option<PathBuf>,
    /// Largest accepted |FP32 − FP16| in percentage points.
    #[arg(long, default_value_t = 0.25)]
    pub tolerance: f64,
    /// Second-domain test set for a domain-gap table.
    #[arg(long)]
    pub target_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long, default_value = "desk")]
    pub environment: String,
    #[arg(long, default_value = "minmax")]
    pub norm: String,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Task bundle whose head the geofm-pretrained arm starts from.
    #[arg(long)]
    pub pretrained_head: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = ["random-random".to_string(), "geofm-random".to_string(), "geofm-pretrained".to_string()])]
    pub arms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.5, 0.25])]
    pub fractions: Vec<f64>,
    /// Number of seeds, counted up from the root seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Bad flag values found after parsing; exits like a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(g) = cause.downcast_ref::<geofm::Error>() {
            return match g.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numeric => 3,
            };
        }
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cmd = Cli::command();
    let argv: Vec<_> = std::env::args_os().collect();
    let parsed = config::merge_args(&cmd, argv).and_then(|argv| Ok(cmd.clone().try_get_matches_from(argv)?));
    let matches = match parsed {
        Ok(m) => m,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                let _ = ce.print();
                return ExitCode::from(if ce.use_stderr() { 1 } else { 0 });
            }
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let resolved = config::resolved(&cmd, &matches);
    match commands::dispatch(&cli, resolved) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
