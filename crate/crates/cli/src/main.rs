//! `flowlm`: corpus generation, joint training, evaluation and synthesis.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowlm::flow::Scheme;
use flowlm::model::MaskKind;
use flowlm::train::TaskMix;

#[derive(Parser, Debug)]
#[command(name = "flowlm", version, about = "Joint recognition and flow-matching synthesis on synthetic frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus's test split.
    Eval(EvalArgs),
    /// Clone a reference voice onto new tokens.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub frame_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub frames_per_token: usize,
    #[arg(long, default_value_t = 8)]
    pub speakers: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 20_000)]
    pub train: usize,
    #[arg(long, default_value_t = 1_000)]
    pub test: usize,
}

/// Unset options take their value from the saved run on `--resume` and from
/// the library defaults otherwise.
#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub task_mix: Option<TaskMix>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tts_mask: Option<MaskKind>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_items: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub adapter_pool: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SamplerArgs {
    /// ODE steps.
    #[arg(long, default_value_t = 32)]
    pub nfe: usize,
    #[arg(long, default_value_t = 2.0)]
    pub cfg_weight: f64,
    #[arg(long, default_value = "euler")]
    pub scheme: Scheme,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalTask {
    Asr,
    Tts,
    Both,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub task: EvalTask,
    /// Recognition items from the test split (default: all).
    #[arg(long)]
    pub asr_items: Option<usize>,
    /// Cloning items per speaker group.
    #[arg(long, default_value_t = 100)]
    pub tts_items: usize,
    #[arg(long, default_value_t = 32)]
    pub max_decode: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for report.json, the manifest and curves.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Also write loss and metric curves from the run's metrics log as CSV.
    #[arg(long)]
    pub curves: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference frames in the corpus frame encoding.
    #[arg(long)]
    pub ref_frames: PathBuf,
    /// Comma-separated reference transcript.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ref_tokens: Vec<u32>,
    /// Comma-separated tokens to speak.
    #[arg(long, value_delimiter = ',', required = true)]
    pub gen_tokens: Vec<u32>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Bad flag combination detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<flowlm::Error>() {
        Some(flowlm::Error::NonFinite { .. }) => 4,
        Some(flowlm::Error::Interrupted { .. }) => 130,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
