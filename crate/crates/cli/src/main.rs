//! `pemf`: train, predict, evaluate and inspect the lesion segmentation
//! network from the command line.
//!
//! Exit codes: 0 success, 2 configuration or checkpoint error, 3 data
//! error, 4 numeric failure during training, 5 gradient check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pemf", version, about = "Breast ultrasound lesion segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoint, loss history and evaluation reports
    Train(TrainArgs),
    /// Segment one PNG image with a trained checkpoint
    Predict(PredictArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic speckled dataset in the flat layout
    Synth(SynthArgs),
    /// Write a stratified k-fold manifest for a dataset
    Folds(FoldsArgs),
    /// Evaluate a checkpoint on a dataset, optionally on one manifest fold
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. --set loss.lambda_tv=0; repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for --set data.source=<DATA>: "synth" or a dataset directory [default: synth]
    #[arg(long)]
    pub data: Option<String>,
    /// Shorthand for --set train.epochs=<EPOCHS> [default: 450]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shorthand for --set train.seed=<SEED> [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for --set output_dir=<OUT> [default: runs/train]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained checkpoint (.pemf)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input PNG image
    #[arg(long)]
    pub input: PathBuf,
    /// Output PNG mask with values 0 and 255
    #[arg(long)]
    pub output: PathBuf,
    /// Probability threshold for the lesion class
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Which suite to run: ops, losses or network
    #[arg(long, default_value = "ops")]
    pub scope: String,
    /// Seed for the random inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the named case's analytic gradient by 1.5 as a negative control [default: none]
    #[arg(long, value_name = "CASE")]
    pub perturb: Option<String>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Number of samples
    #[arg(long, default_value_t = 80)]
    pub count: usize,
    /// Square image side in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Speckle strength in [0, 1)
    #[arg(long, default_value_t = 0.4)]
    pub noise: f64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FoldsArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset layout: flat, busi or busis
    #[arg(long, default_value = "flat")]
    pub layout: String,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Shuffle seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output manifest CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained checkpoint (.pemf)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset layout: flat, busi or busis
    #[arg(long, default_value = "flat")]
    pub layout: String,
    /// Fold manifest; requires --fold [default: evaluate every sample]
    #[arg(long, requires = "fold")]
    pub manifest: Option<PathBuf>,
    /// Evaluate only the ids assigned to this fold
    #[arg(long, requires = "manifest")]
    pub fold: Option<usize>,
    /// Output report CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Probability threshold for the lesion class
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Keep normal-class images in the aggregates [default: off]
    #[arg(long, default_value_t = false)]
    pub include_normal: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
        Command::Folds(a) => commands::folds(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
