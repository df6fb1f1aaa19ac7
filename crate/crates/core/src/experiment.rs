//! Experiment configs and the grid runner.
//!
//! A config is a small INI-style file (`[section]` headers, `key = value`
//! lines, `#` comments). Paths resolve relative to the config's directory
//! and must exist when the config is parsed. Unknown sections or keys are
//! rejected.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, EmbeddingSet, Strategy, StrategySpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, load_nli_tsv, results_tsv, LanguageSide, PromptTemplate, ResultRow, ScoreMode, TaskHead, TaskHyper,
};
use crate::fsutil::write_atomic;
use crate::model::{count_params, ModelConfig, Stack};
use crate::tokenizer::BpeVocab;
use crate::training::{self, adapt, byte_perplexity, chunk_stream, encode_corpus, AdaptOutcome, PresetName, Schedule, TrainPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    /// Target-language adaptation corpus (plain text).
    pub corpus: PathBuf,
    /// Optional held-out target text for perplexity reporting.
    pub heldout: Option<PathBuf>,
    /// Source-language NLI training set for the cross-lingual head.
    pub source_train: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    /// Target prompt template file; defaults to the built-in English one.
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: PresetName,
    pub language: String,
    /// Base checkpoint; adaptation-only use may supply it separately.
    pub checkpoint: Option<PathBuf>,
    pub vocab: PathBuf,
    pub data: DataPaths,
    pub strategy: Strategy,
    pub embeddings: EmbeddingSet,
    pub adapter: AdapterConfig,
    pub plan: TrainPlan,
    pub task: TaskHyper,
    pub score_mode: ScoreMode,
}

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["seed", "preset", "language"]),
    ("model", &["checkpoint"]),
    ("tokenizer", &["vocab"]),
    ("data", &["corpus", "heldout", "source_train", "target_train", "target_test", "template"]),
    ("strategy", &["name", "embeddings", "reduction", "inv_reduction", "invertible", "language_adapters"]),
    ("plan", &["steps", "batch_size", "seq_len", "lr", "schedule", "weight_decay", "clip_norm"]),
    ("eval", &["score_mode", "task_epochs", "task_batch_size", "task_lr", "task_seq_len", "task_reduction"]),
];

type Raw = BTreeMap<(String, String), (String, usize)>;

fn parse_raw(text: &str, name: &str) -> Result<Raw> {
    let mut raw = Raw::new();
    let mut section: Option<&str> = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let s = s.trim();
            section = Some(
                KEYS.iter()
                    .find(|(k, _)| *k == s)
                    .map(|(k, _)| *k)
                    .ok_or_else(|| Error::Config(format!("{name}:{n}: unknown section [{s}]")))?,
            );
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{name}:{n}: expected key = value")))?;
        let (k, v) = (k.trim(), v.trim());
        let sec = section.ok_or_else(|| Error::Config(format!("{name}:{n}: key {k} outside any section")))?;
        let allowed = KEYS.iter().find(|(s, _)| *s == sec).unwrap().1;
        if !allowed.contains(&k) {
            return Err(Error::Config(format!("{name}:{n}: unknown key {k} in [{sec}]")));
        }
        if raw.insert((sec.into(), k.into()), (v.into(), n)).is_some() {
            return Err(Error::Config(format!("{name}:{n}: duplicate key {sec}.{k}")));
        }
    }
    Ok(raw)
}

struct Fields<'a> {
    raw: &'a Raw,
    name: &'a str,
    base: &'a Path,
}

impl Fields<'_> {
    fn get(&self, sec: &str, key: &str) -> Option<(&str, usize)> {
        self.raw.get(&(sec.to_string(), key.to_string())).map(|(v, n)| (v.as_str(), *n))
    }

    fn parse<T: std::str::FromStr>(&self, sec: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(sec, key) {
            None => Ok(default),
            Some((v, n)) => v
                .parse()
                .map_err(|e| Error::Config(format!("{}:{n}: bad value for {sec}.{key}: {e}", self.name))),
        }
    }

    fn path(&self, sec: &str, key: &str) -> Result<Option<PathBuf>> {
        let Some((v, n)) = self.get(sec, key) else { return Ok(None) };
        let p = self.base.join(v);
        let abs = p
            .canonicalize()
            .map_err(|_| Error::Config(format!("{}:{n}: {sec}.{key}: missing file {}", self.name, p.display())))?;
        Ok(Some(abs))
    }

    fn required_path(&self, sec: &str, key: &str) -> Result<PathBuf> {
        self.path(sec, key)?
            .ok_or_else(|| Error::Config(format!("{}: missing required key {sec}.{key}", self.name)))
    }
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    match s {
        "linear" => Ok(Schedule::LinearDecay),
        "constant" => Ok(Schedule::Constant),
        _ => s
            .strip_prefix("cosine:")
            .and_then(|w| w.parse().ok())
            .map(|warmup_steps| Schedule::CosineWithWarmup { warmup_steps })
            .ok_or_else(|| format!("expected linear, constant or cosine:<warmup>, got {s:?}")),
    }
}

fn schedule_text(s: &Schedule) -> String {
    match s {
        Schedule::LinearDecay => "linear".into(),
        Schedule::Constant => "constant".into(),
        Schedule::CosineWithWarmup { warmup_steps } => format!("cosine:{warmup_steps}"),
    }
}

struct Wrap<T>(T);

impl std::str::FromStr for Wrap<Schedule> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_schedule(s).map(Wrap)
    }
}

impl std::str::FromStr for Wrap<Option<f64>> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            return Ok(Wrap(None));
        }
        s.parse::<f64>().map(|v| Wrap(Some(v))).map_err(|e| e.to_string())
    }
}

impl std::str::FromStr for Wrap<ScoreMode> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "whole" => Ok(Wrap(ScoreMode::WholePrompt)),
            "verbalizer" => Ok(Wrap(ScoreMode::VerbalizerOnly)),
            _ => Err(format!("expected whole or verbalizer, got {s:?}")),
        }
    }
}

impl ExperimentConfig {
    /// Parse config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, name: &str, base_dir: &Path) -> Result<Self> {
        Self::parse_with(text, name, base_dir, PresetName::Desk)
    }

    /// As [`parse`](Self::parse), with the preset used when `[run]` names none.
    pub fn parse_with(text: &str, name: &str, base_dir: &Path, default_preset: PresetName) -> Result<Self> {
        let raw = parse_raw(text, name)?;
        let f = Fields { raw: &raw, name, base: base_dir };
        let preset_name: PresetName = f.parse("run", "preset", default_preset)?;
        let preset = training::Preset::get(preset_name);
        let seed: u64 = f.parse("run", "seed", 0)?;
        let adapter = AdapterConfig {
            reduction: f.parse("strategy", "reduction", preset.reduction)?,
            inv_reduction: f.parse("strategy", "inv_reduction", AdapterConfig::default().inv_reduction)?,
            invertible: f.parse("strategy", "invertible", true)?,
            language: f.parse("strategy", "language_adapters", true)?,
        };
        let strategy: Strategy = match f.get("strategy", "name") {
            Some((v, n)) => v.parse().map_err(|e: Error| Error::Config(format!("{name}:{n}: {e}")))?,
            None => return Err(Error::Config(format!("{name}: missing required key strategy.name"))),
        };
        let embeddings: EmbeddingSet = match f.get("strategy", "embeddings") {
            Some((v, n)) => v.parse().map_err(|e: Error| Error::Config(format!("{name}:{n}: {e}")))?,
            None => EmbeddingSet::WteWpe,
        };
        let p = preset.adapt;
        let plan = TrainPlan {
            steps: f.parse("plan", "steps", p.steps)?,
            batch_size: f.parse("plan", "batch_size", p.batch_size)?,
            seq_len: f.parse("plan", "seq_len", p.seq_len)?,
            lr_peak: f.parse("plan", "lr", p.lr_peak)?,
            schedule: f.parse("plan", "schedule", Wrap(p.schedule))?.0,
            optimizer: training::AdamWConfig {
                weight_decay: f.parse("plan", "weight_decay", p.optimizer.weight_decay)?,
                clip_norm: f.parse("plan", "clip_norm", Wrap(p.optimizer.clip_norm))?.0,
                ..p.optimizer
            },
            checkpoints: p.checkpoints,
            seed,
        };
        let t = preset.task;
        let task = TaskHyper {
            epochs: f.parse("eval", "task_epochs", t.epochs)?,
            batch_size: f.parse("eval", "task_batch_size", t.batch_size)?,
            lr: f.parse("eval", "task_lr", t.lr)?,
            seq_len: f.parse("eval", "task_seq_len", t.seq_len)?,
            reduction: f.parse("eval", "task_reduction", t.reduction)?,
            optimizer: t.optimizer,
            seed,
        };
        let cfg = Self {
            seed,
            preset: preset_name,
            language: f.parse("run", "language", "target".to_string())?,
            checkpoint: f.path("model", "checkpoint")?,
            vocab: f.required_path("tokenizer", "vocab")?,
            data: DataPaths {
                corpus: f.required_path("data", "corpus")?,
                heldout: f.path("data", "heldout")?,
                source_train: f.path("data", "source_train")?,
                target_train: f.path("data", "target_train")?,
                target_test: f.path("data", "target_test")?,
                template: f.path("data", "template")?,
            },
            strategy,
            embeddings,
            adapter,
            plan,
            task,
            score_mode: f.parse("eval", "score_mode", Wrap(ScoreMode::WholePrompt))?.0,
        };
        if cfg.task.batch_size == 0 || cfg.task.reduction == 0 || cfg.adapter.reduction == 0 || cfg.adapter.inv_reduction == 0 {
            return Err(Error::Config(format!("{name}: batch sizes and reductions must be >= 1")));
        }
        cfg.plan.schedule.validate(cfg.plan.steps)?;
        cfg.plan.optimizer.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, PresetName::Desk)
    }

    pub fn load_with(path: &Path, default_preset: PresetName) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with(&text, &path.display().to_string(), base, default_preset)
    }

    /// Fully explicit text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |p: &Path| p.display().to_string();
        let _ = writeln!(s, "[run]\nseed = {}\npreset = {}\nlanguage = {}\n", self.seed, self.preset, self.language);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "[model]\ncheckpoint = {}\n", p(c));
        }
        let _ = writeln!(s, "[tokenizer]\nvocab = {}\n", p(&self.vocab));
        let _ = writeln!(s, "[data]\ncorpus = {}", p(&self.data.corpus));
        if let Some(h) = &self.data.heldout {
            let _ = writeln!(s, "heldout = {}", p(h));
        }
        for (k, v) in [
            ("source_train", &self.data.source_train),
            ("target_train", &self.data.target_train),
            ("target_test", &self.data.target_test),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {}", p(v));
            }
        }
        if let Some(t) = &self.data.template {
            let _ = writeln!(s, "template = {}", p(t));
        }
        let a = &self.adapter;
        let _ = writeln!(
            s,
            "\n[strategy]\nname = {}\nembeddings = {}\nreduction = {}\ninv_reduction = {}\ninvertible = {}\nlanguage_adapters = {}\n",
            self.strategy, self.embeddings, a.reduction, a.inv_reduction, a.invertible, a.language
        );
        let pl = &self.plan;
        let clip = pl.optimizer.clip_norm.map_or("none".to_string(), |c| c.to_string());
        let _ = writeln!(
            s,
            "[plan]\nsteps = {}\nbatch_size = {}\nseq_len = {}\nlr = {}\nschedule = {}\nweight_decay = {}\nclip_norm = {clip}\n",
            pl.steps,
            pl.batch_size,
            pl.seq_len,
            pl.lr_peak,
            schedule_text(&pl.schedule),
            pl.optimizer.weight_decay
        );
        let t = &self.task;
        let mode = match self.score_mode {
            ScoreMode::WholePrompt => "whole",
            ScoreMode::VerbalizerOnly => "verbalizer",
        };
        let _ = writeln!(
            s,
            "[eval]\nscore_mode = {mode}\ntask_epochs = {}\ntask_batch_size = {}\ntask_lr = {}\ntask_seq_len = {}\ntask_reduction = {}",
            t.epochs, t.batch_size, t.lr, t.seq_len, t.reduction
        );
        s
    }

    /// First 12 hex digits of the SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }

    /// The paths a full run needs, or a config error naming the first
    /// missing key.
    pub fn run_paths(&self) -> Result<RunPaths<'_>> {
        fn need<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
            v.as_deref()
                .ok_or_else(|| Error::Config(format!("a full run needs {key} in the config")))
        }
        Ok(RunPaths {
            checkpoint: need(&self.checkpoint, "model.checkpoint")?,
            source_train: need(&self.data.source_train, "data.source_train")?,
            target_train: need(&self.data.target_train, "data.target_train")?,
            target_test: need(&self.data.target_test, "data.target_test")?,
        })
    }

    pub fn strategy_spec(&self) -> StrategySpec {
        StrategySpec::new(self.strategy, self.embeddings, self.plan.steps, self.adapter)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunPaths<'a> {
    pub checkpoint: &'a Path,
    pub source_train: &'a Path,
    pub target_train: &'a Path,
    pub target_test: &'a Path,
}

pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// `<root>/<hash>-<unix seconds>`, created with an `INCOMPLETE` marker.
pub fn create_run_dir(root: &Path, hash: &str) -> Result<RunDir> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut path = root.join(format!("{hash}-{ts}"));
    let mut k = 1;
    while path.exists() {
        path = root.join(format!("{hash}-{ts}.{k}"));
        k += 1;
    }
    RunDir::create(path)
}

/// A run's output directory. Stays flagged with `INCOMPLETE` until
/// [`finish`](RunDir::finish).
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    log: Vec<String>,
}

pub const INCOMPLETE: &str = "INCOMPLETE";

impl RunDir {
    pub fn create(path: PathBuf) -> Result<Self> {
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        write_atomic(&path.join(INCOMPLETE), b"")?;
        Ok(Self { path, log: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
        let _ = self.flush_log();
    }

    fn flush_log(&self) -> Result<()> {
        let mut text = self.log.join("\n");
        text.push('\n');
        write_atomic(&self.path.join("log"), text.as_bytes())
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path.join(name), bytes)
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.flush_log()?;
        let marker = self.path.join(INCOMPLETE);
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        Ok(self.path)
    }
}

/// One row of the grid table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub strategy: Strategy,
    pub ckpt_step: u64,
    pub embeddings: EmbeddingSet,
    pub reduction: Option<usize>,
    pub zeroshot: f64,
    pub crosslingual: f64,
    pub supervised: f64,
    /// Held-out byte perplexity on the target language, when a held-out file
    /// is configured: (base, adapted).
    pub byte_perplexity: Option<(f64, f64)>,
}

/// Source-language task heads, keyed by base checkpoint and training setup,
/// so runs sharing a base reuse one head.
#[derive(Debug, Default)]
pub struct SourceHeadCache {
    heads: HashMap<String, TaskHead>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Base checkpoint, both tokenizers and the adaptation result.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub base: Checkpoint,
    pub source_vocab: Option<BpeVocab>,
    pub target_vocab: BpeVocab,
    pub outcome: AdaptOutcome,
}

impl Adapted {
    /// The adapted model as a checkpoint, tagged with the base's step.
    pub fn checkpoint(&self, task_head: Option<TaskHead>) -> Checkpoint {
        Checkpoint {
            model: self.outcome.model.clone(),
            adapters: self.outcome.adapters.clone(),
            task_head,
            vocab: Some(self.target_vocab.clone()),
            pretrain_step: self.base.pretrain_step,
        }
    }
}

/// Load the base checkpoint (from `base`, or the config's) and the target
/// tokenizer and corpus, then adapt with the configured strategy and plan.
pub fn adapt_from_config(cfg: &ExperimentConfig, base: Option<&Path>, log: &mut dyn FnMut(String)) -> Result<Adapted> {
    let path = base
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| Error::Config("no base checkpoint given".into()))?;
    let base = load_checkpoint(path)?;
    let target_vocab = BpeVocab::load(&cfg.vocab)?;
    let corpus = encode_corpus(&target_vocab, &read_text(&cfg.data.corpus)?);
    log(format!(
        "base step {} | strategy {} | embeddings {} | reduction {} | {} target tokens",
        base.pretrain_step,
        cfg.strategy,
        cfg.embeddings,
        cfg.adapter.reduction,
        corpus.len()
    ));
    let out = adapt(&base.model, &target_vocab, &corpus, &cfg.strategy_spec(), &cfg.plan, &cfg.language)?;
    for (phase, start) in out.phase_starts.iter().enumerate() {
        let end = out.phase_starts.get(phase + 1).copied().unwrap_or(out.losses.len());
        if end > *start {
            log(format!(
                "phase {phase}: {} steps, loss {:.4} -> {:.4}",
                end - start,
                out.losses[*start],
                out.losses[end - 1]
            ));
        }
    }
    Ok(Adapted {
        source_vocab: base.vocab.clone(),
        base,
        target_vocab,
        outcome: out,
    })
}

/// Adapt the configured base checkpoint and run all three evaluations.
/// With `run_dir`, the adapted checkpoint, results and log are written there.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &mut SourceHeadCache, mut run_dir: Option<&mut RunDir>) -> Result<RunRow> {
    let paths = cfg.run_paths()?;
    let mut log = |line: String| {
        if let Some(d) = run_dir.as_deref_mut() {
            d.log(line);
        }
    };
    let adapted = adapt_from_config(cfg, None, &mut log)?;
    let (base, target_vocab, out) = (&adapted.base, &adapted.target_vocab, &adapted.outcome);
    let source_vocab = adapted
        .source_vocab
        .as_ref()
        .ok_or_else(|| Error::Config(format!("base checkpoint {} carries no tokenizer", paths.checkpoint.display())))?;
    let target = LanguageSide {
        model: &out.model,
        adapters: out.adapters.as_ref(),
        vocab: target_vocab,
    };
    let stack = Stack::with_adapters(&out.model, out.adapters.as_ref());

    let byte_ppl = match &cfg.data.heldout {
        Some(path) => {
            let text = read_text(path)?;
            let seq = cfg.plan.seq_len;
            let b = byte_perplexity(
                &Stack::base(&base.model),
                source_vocab,
                &chunk_stream(&encode_corpus(source_vocab, &text), seq),
            )?;
            let a = byte_perplexity(&stack, target_vocab, &chunk_stream(&encode_corpus(target_vocab, &text), seq))?;
            log(format!("held-out byte perplexity: base {b:.4}, adapted {a:.4}"));
            Some((b, a))
        }
        None => None,
    };

    let template = match &cfg.data.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::builtin("en")?,
    };
    let test = load_nli_tsv(paths.target_test)?;
    let zs = evaluation::zero_shot_eval(&stack, target_vocab, &template, &test, cfg.score_mode)?;
    log(format!("zero-shot accuracy {:.4}", zs.accuracy));

    let key = format!(
        "{}|{}|{:?}",
        paths.checkpoint.display(),
        paths.source_train.display(),
        cfg.task
    );
    if !cache.heads.contains_key(&key) {
        let train = load_nli_tsv(paths.source_train)?;
        let head = TaskHead::new(base.model.config(), cfg.task.reduction, cfg.task.seed)?;
        let (head, losses) = evaluation::train_task_head(&base.model, None, head, source_vocab, &train, &cfg.task)?;
        log(format!("source head trained: {} steps, final loss {:.4}", losses.len(), losses.last().unwrap_or(&f64::NAN)));
        cache.heads.insert(key.clone(), head);
    }
    let xl = evaluation::cross_lingual_eval(&cache.heads[&key], target, &test, cfg.task.seq_len)?;
    log(format!("cross-lingual accuracy {:.4}", xl.accuracy));

    let train = load_nli_tsv(paths.target_train)?;
    let (sup, head) = evaluation::supervised_eval(target, &train, &test, &cfg.task)?;
    log(format!("supervised accuracy {:.4}", sup.accuracy));

    if let Some(dir) = run_dir {
        dir.write("config", cfg.to_text().as_bytes())?;
        save_checkpoint(&adapted.checkpoint(Some(head)), &dir.path().join("checkpoints").join("adapted"))?;
        let model = format!("{}@{}", cfg.strategy, base.pretrain_step);
        let dataset = paths.target_test.display().to_string();
        let row = |setting: &str, accuracy| ResultRow {
            setting: setting.into(),
            model: model.clone(),
            dataset: dataset.clone(),
            accuracy,
        };
        let rows = [row("zeroshot", zs.accuracy), row("crosslingual", xl.accuracy), row("supervised", sup.accuracy)];
        dir.write("results.tsv", results_tsv(&rows).as_bytes())?;
    }
    Ok(RunRow {
        strategy: cfg.strategy,
        ckpt_step: base.pretrain_step,
        embeddings: cfg.embeddings,
        reduction: cfg.strategy.uses_adapters().then_some(cfg.adapter.reduction),
        zeroshot: zs.accuracy,
        crosslingual: xl.accuracy,
        supervised: sup.accuracy,
        byte_perplexity: byte_ppl,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub id: String,
    pub config: ExperimentConfig,
}

/// Grid file: one `run_id config_path` pair per line; `#` starts a comment.
pub fn parse_grid(text: &str, name: &str, base_dir: &Path) -> Result<Vec<GridEntry>> {
    let mut listed: Vec<(&str, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(path), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!("{name}:{}: expected `run_id config_path`", i + 1)));
        };
        if listed.iter().any(|(seen, _)| *seen == id) {
            return Err(Error::Config(format!("{name}:{}: duplicate run id {id}", i + 1)));
        }
        listed.push((id, path));
    }
    if listed.is_empty() {
        return Err(Error::Config(format!("{name}: grid lists no runs")));
    }
    listed
        .into_iter()
        .map(|(id, path)| {
            let config = ExperimentConfig::load(&base_dir.join(path))?;
            config.run_paths()?;
            Ok(GridEntry { id: id.to_string(), config })
        })
        .collect()
}

pub fn load_grid(path: &Path) -> Result<Vec<GridEntry>> {
    let text = read_text(path)?;
    parse_grid(&text, &path.display().to_string(), path.parent().unwrap_or(Path::new(".")))
}

pub const GRID_HEADER: &str = "strategy\tckpt_step\temb_set\treduction\tzeroshot_acc\tcrosslingual_acc\tsupervised_acc";

#[derive(Debug)]
pub struct GridOutcome {
    pub id: String,
    pub config: ExperimentConfig,
    pub result: std::result::Result<RunRow, Error>,
}

/// Rows in grid order. Failed runs keep their configured dimensions and
/// show `ERR` in every metric column.
pub fn grid_tsv(outcomes: &[GridOutcome]) -> String {
    let mut s = format!("{GRID_HEADER}\n");
    for o in outcomes {
        match &o.result {
            Ok(r) => {
                let red = r.reduction.map_or("-".to_string(), |r| r.to_string());
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{red}\t{:.4}\t{:.4}\t{:.4}",
                    r.strategy, r.ckpt_step, r.embeddings, r.zeroshot, r.crosslingual, r.supervised
                );
            }
            Err(_) => {
                let c = &o.config;
                let red = if c.strategy.uses_adapters() { c.adapter.reduction.to_string() } else { "-".into() };
                let step = c.checkpoint.as_deref().and_then(load_step).map_or("ERR".to_string(), |s| s.to_string());
                let _ = writeln!(s, "{}\t{step}\t{}\t{red}\tERR\tERR\tERR", c.strategy, c.embeddings);
            }
        }
    }
    s
}

fn load_step(dir: &Path) -> Option<u64> {
    let text = fs::read_to_string(dir.join(crate::checkpoint::MANIFEST)).ok()?;
    serde_json::from_str::<serde_json::Value>(&text).ok()?.get("pretrain_step")?.as_u64()
}

/// Run every entry in order. A failing run is recorded and the rest
/// continue. With `runs_root`, each run gets `<runs_root>/<id>/`.
pub fn run_grid(entries: &[GridEntry], runs_root: Option<&Path>, mut progress: impl FnMut(&GridOutcome)) -> Result<Vec<GridOutcome>> {
    let mut cache = SourceHeadCache::default();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let mut dir = match runs_root {
            Some(root) => Some(RunDir::create(root.join(&e.id))?),
            None => None,
        };
        let result = run_experiment(&e.config, &mut cache, dir.as_mut());
        if let Some(mut d) = dir {
            match &result {
                Ok(_) => {
                    d.finish()?;
                }
                Err(err) => d.log(format!("error: kind={} msg={err}", err.kind())),
            }
        }
        let o = GridOutcome {
            id: e.id.clone(),
            config: e.config.clone(),
            result,
        };
        progress(&o);
        out.push(o);
    }
    Ok(out)
}

pub const CAPACITY_HEADER: &str =
    "reduction\tadapter_capacity\tstrategy\tckpt_step\temb_set\tzeroshot_acc\tcrosslingual_acc\tsupervised_acc";

/// Join grid results with the language-adapter parameter count each row's
/// reduction factor implies for `model`. Rows without adapters are skipped;
/// output is ordered by capacity, then by input order.
pub fn capacity_report(model: &ModelConfig, grid_results: &str) -> Result<String> {
    let mut lines = grid_results.lines();
    if lines.next() != Some(GRID_HEADER) {
        return Err(Error::Data("grid results must start with the grid header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(Error::Data(format!("grid results line {}: expected 7 columns", i + 2)));
        }
        if cols[3] == "-" {
            continue;
        }
        let r: usize = cols[3]
            .parse()
            .map_err(|_| Error::Data(format!("grid results line {}: bad reduction {:?}", i + 2, cols[3])))?;
        let adapter = AdapterConfig::with_reduction(r);
        adapter.validate(model.d_model)?;
        let capacity = count_params(model, Some(&adapter), None).by_group["language_adapters"];
        rows.push((capacity, format!("{r}\t{capacity}\t{}\t{}\t{}\t{}\t{}\t{}", cols[0], cols[1], cols[2], cols[4], cols[5], cols[6])));
    }
    rows.sort_by_key(|(c, _)| *c);
    let mut out = format!("{CAPACITY_HEADER}\n");
    for (_, r) in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}
