//! `amil`: synthesize bags, train, evaluate and export attention heatmaps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "amil", version, about = "Attention-based multiple instance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known motif cells.
    Synth(SynthArgs),
    /// Train on a labelled image folder (80/20 train/validation split).
    #[command(
        after_help = "Settings come from built-in defaults, then --config, then flags; a flag always wins.\n\
                      Config files hold `key = value` lines with keys: data, labels, out, learning_rate, epochs,\n\
                      seed, pooling, optimizer, weight_decay, augment, patch_size, stride, attention_dim, timing."
    )]
    Train(TrainArgs),
    /// Report the accuracy of a checkpoint on a labelled image folder.
    Eval(EvalArgs),
    /// Write attention overlays and raw weight grids for images.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub bags: u64,
    /// Patch grid as ROWSxCOLS.
    #[arg(long, default_value = "5x5", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 28, value_parser = clap::value_parser!(u64).range(1..))]
    pub patch: u64,
    #[arg(long, default_value_t = 0.5, value_parser = parse_fraction)]
    pub positive_fraction: f64,
    /// Per-cell motif probability in positive images, in (0, 1].
    #[arg(long, default_value_t = 0.15, value_parser = parse_rate)]
    pub motif_rate: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root; image paths in the labels file are relative to it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `path,label` CSV [default: <data>/labels.csv].
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// attention, max or mean.
    #[arg(long)]
    pub pooling: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Random flip/rotation per image and epoch.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    #[arg(long)]
    pub patch: Option<usize>,
    /// [default: patch size]
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    /// Write wall time into metrics.csv (otherwise the column is 0).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub timing: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint prefix, e.g. `run/best`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// [default: <data>/labels.csv]
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Directory for predictions.csv [default: the checkpoint's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.4, value_parser = parse_unit)]
    pub alpha: f64,
    /// png, or ppm for a bit-exact interchange format.
    #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let dim = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("grid sides must be positive integers, got {s:?}")),
    };
    Ok((dim(r)?, dim(c)?))
}

fn parse_unit(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got {s:?}")),
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    parse_unit(s)
}

fn parse_rate(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1], got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Heatmap(args) => commands::heatmap(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
