mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skipgru::tensor_graph::Activation;
use skipgru::Error;

/// Session skip prediction: synthetic data, track embeddings, training,
/// prediction and scoring.
#[derive(Debug, Parser)]
#[command(name = "skipgru", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic tracks.csv and sessions.csv with a known skip rule.
    GenData(GenDataArgs),
    /// Train track embeddings on session co-occurrence.
    Embed(EmbedArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Predict second-half skips with one model or an ensemble.
    Predict(PredictArgs),
    /// Score a submission against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub sessions: usize,
    #[arg(long, default_value_t = 500)]
    pub tracks: usize,
    #[arg(long, default_value_t = 4)]
    pub acoustic_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub label_noise: f64,
    /// Extra sessions written to holdout.csv (labelled) and holdout_infer.csv
    /// (second half withheld).
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum HeadActivation {
    Relu,
    Elu,
}

impl From<HeadActivation> for Activation {
    fn from(a: HeadActivation) -> Self {
        match a {
            HeadActivation::Relu => Activation::Relu,
            HeadActivation::Elu => Activation::Elu,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint path; defaults to `<checkpoint_dir>/model.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub activation: Option<HeadActivation>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batchnorm: Option<bool>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub valid_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint; repeat for a probability-mean ensemble.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    #[arg(long, default_value = "submission.txt")]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Sessions CSV with second-half labels, or a submission-format file.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub submission: PathBuf,
    /// Write the per-position accuracy table as CSV.
    #[arg(long)]
    pub breakdown: Option<PathBuf>,
    /// Write per-session AA as CSV.
    #[arg(long)]
    pub per_session: Option<PathBuf>,
}

/// 2 usage/config, 3 data or format, 4 numeric failure.
fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        4
    } else if matches!(e, Error::Config(_)) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
