mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

/// Train, sweep, trace and cost out a transformer that prunes its hidden
/// activations at an adjustable preservation rate.
#[derive(Parser, Debug)]
#[command(name = "dra", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune with a uniformly sampled preservation rate per step.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of rates or target speedups.
    #[command(alias = "eval-sweep")]
    Sweep(SweepArgs),
    /// Record which positions each layer keeps for one input.
    Trace(TraceArgs),
    /// Closed-form cost of a preset at a rate or target speedup.
    Cost(CostArgs),
    /// Find the rate that hits a target speedup on a preset.
    Calibrate(CalibrateArgs),
    /// Greedy generation from a prompt.
    Generate(GenerateArgs),
}

/// Run settings; each flag overrides the matching config-file key.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub text_file: Option<String>,
    #[arg(long)]
    pub min_len: Option<String>,
    #[arg(long)]
    pub max_len: Option<String>,
    #[arg(long)]
    pub alphabet: Option<String>,
    #[arg(long)]
    pub parity_len: Option<String>,
    #[arg(long)]
    pub chunk: Option<String>,
    #[arg(long)]
    pub examples: Option<String>,
    #[arg(long)]
    pub eval_examples: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_model: Option<String>,
    #[arg(long)]
    pub n_layers: Option<String>,
    #[arg(long)]
    pub n_heads: Option<String>,
    #[arg(long)]
    pub d_mlp: Option<String>,
    #[arg(long)]
    pub max_seq_len: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub alpha_lo: Option<String>,
    #[arg(long)]
    pub alpha_hi: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// monotonic or rescoring.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

impl RunArgs {
    pub fn overrides(&self) -> Vec<(&'static str, &str)> {
        let pairs: [(&'static str, &Option<String>); 26] = [
            ("task", &self.task),
            ("text_file", &self.text_file),
            ("min_len", &self.min_len),
            ("max_len", &self.max_len),
            ("alphabet", &self.alphabet),
            ("parity_len", &self.parity_len),
            ("chunk", &self.chunk),
            ("examples", &self.examples),
            ("eval_examples", &self.eval_examples),
            ("preset", &self.preset),
            ("d_model", &self.d_model),
            ("n_layers", &self.n_layers),
            ("n_heads", &self.n_heads),
            ("d_mlp", &self.d_mlp),
            ("max_seq_len", &self.max_seq_len),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("steps", &self.steps),
            ("dropout", &self.dropout),
            ("alpha_lo", &self.alpha_lo),
            ("alpha_hi", &self.alpha_hi),
            ("tau", &self.tau),
            ("seed", &self.seed),
            ("mode", &self.mode),
            ("out_dir", &self.out_dir),
        ];
        pairs.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated preservation rates.
    #[arg(long, value_delimiter = ',', conflicts_with = "speedups")]
    pub alphas: Vec<f64>,
    /// Comma-separated target MAC speedups; rates are calibrated per target.
    #[arg(long, value_delimiter = ',')]
    pub speedups: Vec<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input text (bytes are tokens).
    #[arg(long, conflicts_with = "input_file")]
    pub text: Option<String>,
    #[arg(long)]
    pub input_file: Option<PathBuf>,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5)]
    pub tau: usize,
    #[arg(long, default_value = "monotonic")]
    pub mode: String,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// One of the named presets; omit to give custom dimensions.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, requires_all = ["heads", "d_model", "d_mlp"], conflicts_with = "preset")]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_mlp: Option<usize>,
    #[arg(long)]
    pub seq: usize,
    #[arg(long, conflicts_with = "target_speedup")]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub target_speedup: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub tau: usize,
    /// Print a CSV row instead of a table.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub seq: usize,
    #[arg(long)]
    pub target_speedup: f64,
    #[arg(long, default_value_t = 5)]
    pub tau: usize,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 16)]
    pub n_new: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5)]
    pub tau: usize,
    /// Also time the prefill this many times and report the median.
    #[arg(long)]
    pub ttft_reps: Option<usize>,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("DRA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage("DRA_THREADS", format!("expected a positive integer, got {v:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build_global()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Generate(a) => commands::generate(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
