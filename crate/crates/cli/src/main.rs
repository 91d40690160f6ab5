//! `tjstg`: generate synthetic scenes, train, evaluate, gradient-check and
//! dump attention maps.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 contract violation,
//! 4 gradient check failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Contract(String),
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Contract(_) => 3,
            CliError::GradCheck(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Contract(m) => write!(f, "{m}"),
            CliError::GradCheck(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl From<tjstg_core::Error> for CliError {
    fn from(e: tjstg_core::Error) -> Self {
        use tjstg_core::Error as E;
        match e {
            E::Io { .. } | E::Format { .. } => CliError::Io(e.to_string()),
            _ => CliError::Contract(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tjstg", version, about = "Target-aware joint spatio-temporal grounding for audio-visual QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Two-stage training; writes checkpoints and metrics CSVs.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Spatial heatmaps (PGM) and temporal weights (CSV) of a checkpoint.
    DumpAttn(DumpArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags take precedence.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Segments per video.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub n_words: Option<usize>,
    /// Grid as `H` or `HxW`.
    #[arg(long, value_name = "HxW")]
    pub grid: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of concept classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Answer vocabulary size.
    #[arg(long)]
    pub answers: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub noise: Option<f64>,
    /// counting | existential
    #[arg(long)]
    pub question: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Fraction of scenes paired with another scene's audio.
    #[arg(long, allow_negative_numbers = true)]
    pub negatives: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Disable the target-aware gate.
    #[arg(long)]
    pub no_ta: bool,
    /// literal | renormalize
    #[arg(long)]
    pub grounding_mode: Option<String>,
    /// va | av | cat-va | cat-av
    #[arg(long)]
    pub interleave_order: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Dataset directory written by `gen`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub no_csl: bool,
    /// Stage-II epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Skip stage I; requires --init.
    #[arg(long)]
    pub stage2_only: bool,
    /// Checkpoint directory to start from.
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// train | val | test
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, default_value_t = tjstg_core::tensor::DEFAULT_GRADCHECK_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Negate the backward rule of one op kind (fault injection).
    #[arg(long, hide = true, value_name = "OP", num_args = 0..=1, default_missing_value = "matmul")]
    pub inject_sign_flip: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Dump only the first N scenes of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::DumpAttn(a) => commands::dump_attn(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tjstg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
