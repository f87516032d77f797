//! `pchvae`: data generation, training, evaluation and sweeps from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pchvae::Error;

#[derive(Parser)]
#[command(name = "pchvae", version, about = "Primary-components hierarchical VAE workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset (PCHT stacks plus manifest).
    GenData(GenData),
    /// Train one variant on a generated dataset.
    Train(Train),
    /// Reconstruction MSE and anomaly AUROC/AP of a checkpoint on the test split.
    Eval(Eval),
    /// Write input and reconstruction panels of one slice as PGM images.
    Reconstruct(Reconstruct),
    /// Finite-difference check of every variant's full loss gradient.
    GradCheck(GradCheck),
    /// Linear two-component objectives, bound check and PCA recovery.
    LinearDemo(LinearDemo),
    /// Multi-seed train and evaluation of several variants.
    Sweep(Sweep),
}

#[derive(Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 0)]
    pub n_val: usize,
    #[arg(long, default_value_t = 400)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.5)]
    pub anomaly_frac: f64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `objects` (disc, square, ring) or `blobs` (smooth graded blobs).
    #[arg(long, default_value = "objects")]
    pub anomaly_family: String,
}

/// Training hyperparameters; each flag overrides the config file.
#[derive(Args, Clone, Default)]
pub struct TrainFlags {
    /// Flat `key=value` file with training, architecture and loss settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Repeatable `key=value` override for any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint of the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-slice score table here.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub n_draws: usize,
    /// Add the weighted zero-pass term to the anomaly score.
    #[arg(long)]
    pub include_term3: bool,
    #[arg(long, default_value_t = 0)]
    pub score_seed: u64,
    /// Use a posterior draw instead of the posterior mean for the MSE.
    #[arg(long)]
    pub sampled_mse: bool,
}

#[derive(Args)]
pub struct Reconstruct {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub slice: usize,
    /// `test`, `train` or `val`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradCheck {
    /// A single variant; all four when omitted.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    /// Coordinates checked per parameter tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 12)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct LinearDemo {
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub k1: usize,
    #[arg(long, default_value_t = 2)]
    pub k2: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    /// Objective trace CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct Sweep {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds; runs use seeds `first_seed .. first_seed + seeds`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value = "high,low,ch,pch", value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub n_draws: usize,
    #[arg(long)]
    pub include_term3: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

/// Process exit status for a failed command.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Truncated(_) => 4,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
        Command::LinearDemo(a) => commands::linear_demo(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
