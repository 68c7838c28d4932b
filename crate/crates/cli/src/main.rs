//! `cct`: train, evaluate, predict with and plot a Compact Convolutional
//! Transformer on MedMNIST-style archives.

mod commands;
mod error;
mod plot;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, EXIT_FAILURE};

#[derive(Debug, Parser)]
#[command(name = "cct", version, about = "Compact Convolutional Transformer for blood-cell images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and keep the checkpoint with the best holdout accuracy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write the report files.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Render SVG plots from a run or report directory.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Hyperparameter overrides; these take precedence over `--config`.
#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// NPZ archive with train/val/test splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint, trainlog.csv and config echo.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path (default: <out>/best.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Disable random crop and flip.
    #[arg(long)]
    pub no_augment: bool,
    /// Record elapsed seconds in trainlog.csv (makes it run-dependent).
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Optional run configuration; its model keys must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Report directory (default: report_dir from --config, else
    /// <checkpoint dir>/eval_<split>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw H×W×C uint8 image (2,352 bytes for 28×28×3).
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub image: Option<PathBuf>,
    /// NPZ archive to take the image from (with --index).
    #[arg(long, visible_alias = "npz", requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Directory holding trainlog.csv and/or roc_*.csv.
    pub dir: PathBuf,
    /// Directory holding roc_*.csv, when different from DIR.
    #[arg(long)]
    pub roc_dir: Option<PathBuf>,
    /// Where to write the SVG files (default: DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Plot(a) => commands::plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
