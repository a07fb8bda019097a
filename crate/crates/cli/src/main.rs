//! `slt`: data preparation, training, translation and analysis.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime or numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod plot;
mod run;

#[derive(Parser, Debug)]
#[command(name = "slt", version, about = "Sign-language translation pipeline")]
struct Cli {
    /// Root under which content-addressed run directories are created.
    #[arg(long, env = "SLT_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest (or generate a synthetic corpus) and write corpus statistics.
    Prepare(PrepareArgs),
    /// Alignment warm-up followed by joint training.
    Train(TrainArgs),
    /// Decode every sample of a split with a trained checkpoint.
    Translate(TranslateArgs),
    /// Metrics, embedding entropy and visual-token readouts.
    Analyze(AnalyzeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for slt_core::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Valid => Self::Valid,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeArg {
    #[value(name = "13a")]
    #[serde(rename = "13a")]
    T13a,
    Zh,
}

#[derive(Args, Debug, Serialize)]
pub struct PrepareArgs {
    /// JSONL manifest to validate.
    pub manifest: Option<PathBuf>,
    /// Generate the synthetic toy corpus instead of reading a manifest.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub frames_per_word: usize,
    /// Required frame shape as HxWxC.
    #[arg(long)]
    pub frame_shape: Option<String>,
    /// Explicit output directory instead of a content-addressed one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Prepared corpus manifest; the train split is used.
    #[arg(long)]
    pub corpus: PathBuf,
    /// TOML file with optional `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TranslateArgs {
    /// Checkpoint directory, or a train run directory (its latest checkpoint).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    /// Hypotheses: JSONL records from `translate`, or one sentence per line.
    #[arg(long)]
    pub hypotheses: Option<PathBuf>,
    /// References, one per line (not needed with JSONL hypotheses).
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TokenizeArg::T13a)]
    pub tokenize: TokenizeArg,
    /// SPFT matrix of embeddings (rows = samples); repeatable.
    #[arg(long)]
    pub kde: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub pca_dims: usize,
    /// Fixed KDE bandwidth (Scott's rule when omitted).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Read out nearest-word visual tokens (needs --checkpoint and --corpus).
    #[arg(long)]
    pub visual_tokens: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Emit PNG plots next to the report.
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .any(|e| e.downcast_ref::<slt_core::Error>().is_some_and(slt_core::Error::is_validation));
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let root = cli.output_root;
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&root, a),
        Command::Train(a) => commands::train(&root, a),
        Command::Translate(a) => commands::translate(&root, a),
        Command::Analyze(a) => commands::analyze(&root, a),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
