mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::EXIT_USAGE;

/// Two-stream CNN/Transformer skeleton interaction recognition.
#[derive(Debug, Parser)]
#[command(name = "thct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic interaction dataset (train and val caches).
    GenData(GenDataArgs),
    /// Train both streams and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy, per-class accuracy, confusion matrix.
    Eval(EvalArgs),
    /// Run the oracle suites and gradient checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Dataset directory holding train.thctds and val.thctds.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and metrics.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
    /// Token window extents.
    #[arg(long, value_name = "T,V,M")]
    window: Option<String>,
    /// Weight of the transformer stream in late fusion.
    #[arg(long, value_name = "F")]
    fusion_weight: Option<f64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Training samples per class.
    #[arg(long, value_name = "N")]
    per_class: Option<usize>,
    /// Validation samples per class (default: half of --per-class, at least 1).
    #[arg(long, value_name = "N")]
    val_per_class: Option<usize>,
    /// Coordinate noise standard deviation.
    #[arg(long, value_name = "F")]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Checkpoint to evaluate (default: best.ckpt in the run directory).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Split to evaluate: train or val.
    #[arg(long, value_name = "NAME")]
    split: Option<String>,
    /// Print fused accuracy for w = 0, 0.1, ..., 1.
    #[arg(long)]
    sweep_fusion: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Flip the backward rule of one op (negative control).
    #[arg(long, value_name = "OP")]
    fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
