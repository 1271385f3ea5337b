//! `mlmp`: corpus tools, byte-level BPE, packing, pretraining and fine-tuning.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mlmp::masking::MaskingMode;
use mlmp::packing::PackingFormat;

pub const SEED_ENV: &str = "MLMP_SEED";

#[derive(Parser, Debug)]
#[command(name = "mlmp", version, about = "Masked-language-model pretraining toolkit", arg_required_else_help = true)]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus inspection and preparation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Learn a byte-level BPE vocabulary.
    TrainBpe(TrainBpeArgs),
    /// Text to token ids (space separated).
    Encode(EncodeArgs),
    /// Token ids back to bytes.
    Decode(DecodeArgs),
    /// Pack a corpus into training instances.
    Pack(PackArgs),
    /// Statistics over packed instances.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Pretrain an encoder with masked-token prediction.
    Pretrain(PretrainArgs),
    /// Held-out masked-token perplexity of a checkpoint.
    EvalPpl(EvalPplArgs),
    /// Fine-tune a pretrained checkpoint on a downstream task.
    Finetune(FinetuneArgs),
    /// Step counts that keep batch size times steps fixed.
    EquivBudget(EquivBudgetArgs),
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Document, sentence and byte counts.
    Stats {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Write a synthetic corpus of roughly the requested size.
    Synth {
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split documents into train and held-out files.
    Split {
        #[arg(long, default_value_t = 0.05)]
        heldout: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        heldout_out: PathBuf,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainBpeArgs {
    /// Vocabulary size including the 256 bytes and 5 specials.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Read from standard input (the default when no file is given).
    #[arg(long, conflicts_with = "file")]
    stdin: bool,
    file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Whitespace-separated ids; standard input when absent.
    file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PackArgs {
    #[arg(long)]
    format: PackingFormat,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum StatsCmd {
    /// Empirical selection rate and corruption shares.
    Mask {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Masked instances to draw; cycles through epochs past the file length.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value = "dynamic")]
        mode: MaskingMode,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Length and label summary of an instance file.
    Instances { path: PathBuf },
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// TOML run file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus files or directories of `.txt` files.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Existing vocabulary; otherwise one is trained on the training split.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many steps (the run can be resumed).
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalPplArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Packed held-out instances.
    #[arg(long)]
    heldout: PathBuf,
    /// Packed training instances for the unigram baseline.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TaskArg {
    Cls,
    Span,
    Choice,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    task: TaskArg,
    /// Pretrained or previously fine-tuned checkpoint; task heads are re-initialised.
    #[arg(long, visible_alias = "init-from")]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// TOML overrides of the task's default grid.
    #[arg(long)]
    cfg: Option<PathBuf>,
    /// Train an answerable/unanswerable head (span only).
    #[arg(long)]
    answerability: bool,
    /// Directory for the best model and the sweep report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EquivBudgetArgs {
    batch_size: u64,
    steps: u64,
    /// Batch sizes to convert to.
    #[arg(long = "bsz", required = true)]
    targets: Vec<u64>,
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(mlmp::Error),
}

impl From<mlmp::Error> for Failure {
    fn from(e: mlmp::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        use mlmp::Error as E;
        match self {
            Failure::Usage(_) | Failure::Core(E::Argument(_) | E::Config(_)) => 1,
            Failure::Core(E::NonFinite(_)) => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Explicit flag, then the config file, then `MLMP_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Corpus(c) => commands::corpus(c),
        Command::TrainBpe(a) => commands::train_bpe(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Pack(a) => commands::pack(a),
        Command::Stats(c) => commands::stats(c),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::EvalPpl(a) => commands::eval_ppl(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::EquivBudget(a) => commands::equiv_budget(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
