use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tcn_core::signal::{Normalization, SignalFormat, DEFAULT_WINDOW_LEN};

#[derive(Debug, Parser)]
#[command(name = "tcn", version, about = "Unsupervised vibration fault detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; each --data input holds the signals of one operating condition.
    Train(TrainArgs),
    /// Score every window of the inputs and emit one verdict record per window.
    Classify(ClassifyArgs),
    /// Count accepted and rejected windows over labeled validation directories.
    Evaluate(EvaluateArgs),
    /// Write per-cluster probabilities with threshold and failure reference values.
    ExportPlot(ExportPlotArgs),
    /// Generate a synthetic multi-condition dataset with fault signals.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Signal file or directory of signal files (repeatable).
    #[arg(long = "data", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Input format; inferred from the file extension when omitted.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<SignalFormat>,
}

#[derive(Debug, Clone, Args)]
pub struct WindowArgs {
    /// Window length in samples.
    #[arg(long, default_value_t = DEFAULT_WINDOW_LEN)]
    pub window: usize,
    /// Hop between window starts; defaults to the window length.
    #[arg(long)]
    pub hop: Option<usize>,
    /// Per-window normalization: none or zscore.
    #[arg(long, default_value = "none", value_parser = parse_normalization)]
    pub normalize: Normalization,
    /// Sample rate recorded with the signals, in Hz.
    #[arg(long, default_value_t = 12_000.0)]
    pub sample_rate: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Number of clusters; defaults to the number of --data inputs.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 150)]
    pub epochs1: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs3: usize,
    /// Autoencoder learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.10)]
    pub threshold_quantile: f64,
    #[arg(long, default_value_t = 0.60)]
    pub failure_ratio: f64,
    /// Output model file.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 10)]
    pub alarm_window: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alarm_fraction: f64,
    #[arg(long, value_enum, default_value_t = Emit::Csv)]
    pub emit: Emit,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of pristine signals (repeatable); each file is one group.
    #[arg(long, required = true, num_args = 1..)]
    pub pristine: Vec<PathBuf>,
    /// Directory of fault signals (repeatable); each file is one group.
    #[arg(long, num_args = 1..)]
    pub faults: Vec<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<SignalFormat>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExportPlotArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory; receives train/, holdout/ and faults/.
    #[arg(long)]
    pub out: PathBuf,
    /// Training windows per condition.
    #[arg(long, default_value_t = 100)]
    pub train: usize,
    /// Held-out pristine windows per condition.
    #[arg(long, default_value_t = 20)]
    pub holdout: usize,
    /// Fault windows per condition.
    #[arg(long, default_value_t = 20)]
    pub faults: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW_LEN)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_format(s: &str) -> Result<SignalFormat, String> {
    s.parse().map_err(|e: tcn_core::TcnError| e.to_string())
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    s.parse().map_err(|e: tcn_core::TcnError| e.to_string())
}
