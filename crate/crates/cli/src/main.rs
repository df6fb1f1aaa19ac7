//! `langadapt` command-line driver.
//!
//! Every subcommand is a thin shim over the library. Failures print one
//! line, `error: kind=<kind> msg=<message>`, and exit with 2 for usage and
//! configuration problems (including missing input files) or 1 otherwise.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use langadapt::adapters::{EmbeddingSet, Strategy};
use langadapt::training::PresetName;

#[derive(Debug, Parser)]
#[command(name = "langadapt", version, about = "Adapt pretrained decoder LMs to new languages")]
pub struct Cli {
    /// Seed for every random choice (overrides a config's `[run] seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hyperparameter preset: full-scale reference values or desk scale.
    #[arg(long, global = true)]
    pub preset: Option<PresetName>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a byte-level BPE vocabulary on text files.
    TrainTokenizer(TrainTokenizerArgs),
    /// Pretrain a decoder LM on one or more tokenized corpora.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained checkpoint to a new language.
    Adapt(AdaptArgs),
    /// Prompt-based zero-shot NLI accuracy of a checkpoint.
    EvalZeroshot(ZeroShotArgs),
    /// Source-trained task head evaluated on an adapted target model.
    EvalCrosslingual(CrossLingualArgs),
    /// Train a task head on target data and evaluate it.
    EvalSupervised(SupervisedArgs),
    /// Parameter counts by group, total and trainable.
    Params(ParamsArgs),
    /// Run a grid of experiment configs and tabulate the results.
    Grid(GridArgs),
    /// Adapter capacity against accuracy, from grid results.
    Capacity(CapacityArgs),
    /// Generate synthetic corpora, NLI sets and prompt templates.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Training text; one example per line. Repeatable.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Target vocabulary size (256 byte tokens + merges + specials).
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Special token appended after the merges. Repeatable.
    #[arg(long)]
    pub special: Vec<String>,
    /// Split lines on whitespace before counting pairs.
    #[arg(long)]
    pub whitespace_split: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory (default: a fresh `<runs-root>/<hash>-<timestamp>/`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mixture {
    /// Equal probability for every corpus.
    Uniform,
    /// The 13-language reference mixture; corpus names must match it.
    Reference,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// `NAME=PATH` text corpus. Repeatable.
    #[arg(long, required = true)]
    pub corpus: Vec<String>,
    /// Tokenizer file.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = Mixture::Uniform)]
    pub mixture: Mixture,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Save a checkpoint every N steps.
    #[arg(long, conflicts_with = "checkpoint_at")]
    pub checkpoint_every: Option<usize>,
    /// Save checkpoints at these steps (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub checkpoint_at: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Experiment config supplying tokenizer, corpus and plan.
    #[arg(long)]
    pub config: PathBuf,
    /// Base checkpoint (overrides `[model] checkpoint`).
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub embeddings: Option<EmbeddingSet>,
    #[arg(long)]
    pub reduction: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreModeArg {
    /// Mean log-probability of the whole rendered prompt.
    Whole,
    /// Mean log-probability of the verbalizer tokens only.
    Verbalizer,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    /// Checkpoint with its tokenizer.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// NLI TSV (`premise<TAB>hypothesis<TAB>label`).
    #[arg(long)]
    pub data: PathBuf,
    /// Template file; overrides `--lang`.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Built-in template: en, de or ko.
    #[arg(long, default_value = "en")]
    pub lang: String,
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Whole)]
    pub score_mode: ScoreModeArg,
    /// Also write the results table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Task-adapter reduction factor.
    #[arg(long)]
    pub reduction: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CrossLingualArgs {
    /// Source checkpoint; its task head is used, or trained when absent.
    #[arg(long)]
    pub source: PathBuf,
    /// Source-language NLI TSV for training a head the source lacks.
    #[arg(long)]
    pub source_train: Option<PathBuf>,
    /// Adapted target checkpoint with its tokenizer.
    #[arg(long)]
    pub target: PathBuf,
    /// Target-language evaluation TSV.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SupervisedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Save the checkpoint with its trained head here.
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Count a checkpoint's layout instead of the preset model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Count trainable parameters under this strategy.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, default_value = "wte,wpe")]
    pub embeddings: EmbeddingSet,
    /// Adapter reduction factor (default: the checkpoint's, else the preset's).
    #[arg(long)]
    pub reduction: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Grid file: `run_id config_path` per line.
    #[arg(long)]
    pub grid: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    /// Grid results TSV.
    #[arg(long)]
    pub results: PathBuf,
    /// Model whose adapter sizes to count (default: the preset model).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthLang {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Corpus,
    Nli,
    Template,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub lang: SynthLang,
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Lines (corpus) or examples (nli).
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Share of corpus lines written as prompt-style NLI renderings.
    #[arg(long, default_value_t = 0.3)]
    pub prompt_share: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = commands::classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={kind} msg={msg}");
            ExitCode::from(code)
        }
    }
}
