use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod train;

use fsrnn::training::Precision;

#[derive(Parser)]
#[command(name = "fsrnn", version, about = "Fast-Slow LSTM character language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a preset or config file.
    Train(TrainArgs),
    /// Score a checkpoint on one split and print `bpc=…`.
    Evaluate(EvalArgs),
    /// Network-dynamics analyses of trained checkpoints.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Evaluate the averaged prediction of several checkpoints.
    Ensemble(EnsembleArgs),
    /// Print a preset (optionally scaled) as a config file.
    DumpConfig {
        preset: String,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// List the built-in presets.
    Presets,
    /// Write a seeded synthetic English-like text corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file; overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Multiply every layer width by this factor (rounded up).
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent directory of the run directory; overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Discard an existing run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Mean ‖∂L_t/∂c_{t−k}‖ per layer and lag.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        max_lag: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Steps before each anchor; defaults to max_lag + 51.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
    },
    /// Mean squared per-unit change of each layer's cell state.
    ChangeRate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value = "change_rate.csv")]
        out: PathBuf,
    },
    /// BPC by character position inside words; the first checkpoint is the
    /// reference for relative loss.
    PositionBpc {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10)]
        max_pos: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value = "position_bpc.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value = "ensemble.csv")]
    out: PathBuf,
}

fn exit_code(e: &fsrnn::Error) -> u8 {
    use fsrnn::Error::*;
    match e {
        Data(_) | Io { .. } => 2,
        NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Analyze { kind } => commands::analyze(kind),
        Command::Ensemble(a) => commands::ensemble(a),
        Command::DumpConfig { preset, scale } => commands::dump_config(&preset, scale),
        Command::Presets => {
            for (name, about) in fsrnn::config::PRESETS {
                println!("{name:20} {about}");
            }
            Ok(())
        }
        Command::Synth { out, len, seed } => commands::synth(&out, len, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
