//! Optimization: schedules, AdamW, language sampling, and the pretraining
//! and adaptation loops.

mod data;
mod optim;
mod sampling;
mod schedule;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use numcore::{Graph, NumError, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{chunk_stream, encode_corpus, sample_batch, sample_window};
pub use optim::{AdamW, AdamWConfig, ParamGrad, StepStats};
pub use sampling::SamplingTable;
pub use schedule::Schedule;

use crate::adapters::{AdapterBank, StrategySpec};
use crate::error::{Error, Result};
use crate::evaluation::TaskHead;
use crate::model::{Bindings, ModelConfig, ModelParams, Stack, TokenBatch};
use crate::params::mix_seed;
use crate::tokenizer::BpeVocab;

/// When a run writes checkpoints. The final step is always included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    FinalOnly,
    Every(usize),
    At(Vec<usize>),
}

impl CheckpointPolicy {
    pub fn steps(&self, total: usize) -> Vec<usize> {
        let mut out: Vec<usize> = match self {
            CheckpointPolicy::FinalOnly => vec![],
            CheckpointPolicy::Every(n) if *n > 0 => (1..=total / n).map(|k| k * n).collect(),
            CheckpointPolicy::Every(_) => vec![],
            CheckpointPolicy::At(steps) => steps.iter().copied().filter(|&s| s > 0 && s <= total).collect(),
        };
        if total > 0 {
            out.push(total);
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub schedule: Schedule,
    pub lr_peak: f64,
    pub optimizer: AdamWConfig,
    pub checkpoints: CheckpointPolicy,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2".into()));
        }
        if self.seq_len > config.max_positions {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_positions {}",
                self.seq_len, config.max_positions
            )));
        }
        if !(self.lr_peak.is_finite() && self.lr_peak >= 0.0) {
            return Err(Error::Config(format!("lr_peak must be finite and >= 0, got {}", self.lr_peak)));
        }
        if let CheckpointPolicy::Every(0) = self.checkpoints {
            return Err(Error::Config("checkpoint interval must be >= 1".into()));
        }
        self.schedule.validate(self.steps)?;
        self.optimizer.validate()
    }
}

/// Mutable view of everything a training loop may update.
pub(crate) struct Parts<'a> {
    pub model: &'a mut ModelParams,
    pub adapters: Option<&'a mut AdapterBank>,
    pub task: Option<&'a mut TaskHead>,
}

impl Parts<'_> {
    pub fn stack(&self) -> Stack<'_> {
        Stack {
            model: self.model,
            adapters: self.adapters.as_deref(),
            task: self.task.as_deref(),
        }
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(t) = self.model.get_mut(name) {
            return Some(t);
        }
        if let Some(t) = self.adapters.as_mut().and_then(|a| a.tensors_mut().get_mut(name)) {
            return Some(t);
        }
        self.task.as_mut().and_then(|h| h.tensors_mut().get_mut(name))
    }
}

/// Step-wise hyperparameters for [`run_phase`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct PhaseSettings {
    pub steps: usize,
    pub schedule: Schedule,
    pub lr_peak: f64,
    pub optimizer: AdamWConfig,
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Num(NumError::NonFinite { node, op }) => {
            Error::Numeric(format!("diverged at step {step}: non-finite value from {op} (node {node})"))
        }
        Error::Numeric(msg) => Error::Numeric(format!("diverged at step {step}: {msg}")),
        other => other,
    }
}

/// Run `settings.steps` optimizer steps updating only `trainable`. `loss`
/// builds the step's scalar loss; `after` sees the parts after each update
/// with the 1-based step number. Returns the per-step losses.
pub(crate) fn run_phase(
    parts: &mut Parts<'_>,
    trainable: &BTreeSet<String>,
    settings: PhaseSettings,
    mut loss: impl FnMut(&Stack<'_>, &mut Graph, &Bindings, usize) -> Result<Var>,
    mut after: impl FnMut(usize, &Parts<'_>) -> Result<()>,
) -> Result<Vec<f64>> {
    for name in trainable {
        if parts.tensor_mut(name).is_none() {
            return Err(Error::Contract(format!("trainable tensor {name} does not exist")));
        }
    }
    let mut opt = AdamW::new(settings.optimizer)?;
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut g = Graph::new();
        let (value, grads) = {
            let stack = parts.stack();
            let b = stack.bind(&mut g, trainable);
            let l = loss(&stack, &mut g, &b, step).map_err(|e| at_step(step, e))?;
            let value = g.scalar(l).map_err(|e| at_step(step, e.into()))?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("diverged at step {step}: loss is {value}")));
            }
            g.backward(l).map_err(|e| at_step(step, e.into()))?;
            let grads = trainable
                .iter()
                .map(|n| {
                    let v = b.get(n)?;
                    let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                    Ok((n.clone(), grad))
                })
                .collect::<Result<Vec<_>>>()?;
            (value, grads)
        };
        let lr = settings.schedule.lr(step, settings.steps, settings.lr_peak)?;
        // collect disjoint &mut borrows: names are unique, so take them one by one
        let mut values: Vec<(String, Tensor)> = grads
            .iter()
            .map(|(n, _)| (n.clone(), std::mem::replace(parts.tensor_mut(n).unwrap(), Tensor::scalar(0.0))))
            .collect();
        let result = {
            let mut batch: Vec<ParamGrad<'_>> = values
                .iter_mut()
                .zip(&grads)
                .map(|((n, v), (_, g))| ParamGrad { name: n, value: v, grad: g })
                .collect();
            opt.step(&mut batch, lr)
        };
        for (n, v) in values {
            *parts.tensor_mut(&n).unwrap() = v;
        }
        result.map_err(|e| at_step(step, e))?;
        losses.push(value);
        after(step + 1, parts)?;
    }
    Ok(losses)
}

fn lm_step_loss(stack: &Stack<'_>, g: &mut Graph, b: &Bindings, batch: &TokenBatch) -> Result<Var> {
    stack.lm_loss_graph(g, b, batch)
}

/// Model after pretraining plus the per-step loss curve.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ModelParams,
    pub losses: Vec<f64>,
}

/// Causal-LM pretraining over several languages. Each batch row draws its
/// language from `table`, then a random window from that language's stream.
/// `on_checkpoint(step, model)` fires at every step of the plan's checkpoint
/// policy (always including the last).
pub fn pretrain(
    config: &ModelConfig,
    corpora: &IndexMap<String, Vec<u32>>,
    table: &SamplingTable,
    plan: &TrainPlan,
    mut on_checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<PretrainOutcome> {
    plan.validate(config)?;
    if plan.steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    for lang in table.languages() {
        let stream = corpora
            .get(lang)
            .ok_or_else(|| Error::Data(format!("no corpus for sampled language {lang}")))?;
        if stream.len() < plan.seq_len {
            return Err(Error::Data(format!(
                "corpus for {lang} has {} tokens, fewer than seq_len {}",
                stream.len(),
                plan.seq_len
            )));
        }
        if let Some(&bad) = stream.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::Config(format!("corpus {lang} holds id {bad} outside vocab {}", config.vocab_size)));
        }
    }
    let mut model = ModelParams::build(config)?;
    let all: BTreeSet<String> = model.tensors().keys().cloned().collect();
    let ckpt_steps: BTreeSet<usize> = plan.checkpoints.steps(plan.steps).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(plan.seed, 0x5eed));
    let settings = PhaseSettings {
        steps: plan.steps,
        schedule: plan.schedule,
        lr_peak: plan.lr_peak,
        optimizer: plan.optimizer,
    };
    let mut parts = Parts {
        model: &mut model,
        adapters: None,
        task: None,
    };
    let losses = run_phase(
        &mut parts,
        &all,
        settings,
        |stack, g, b, _| {
            let rows = (0..plan.batch_size)
                .map(|_| {
                    let lang = table.sample(&mut rng);
                    sample_window(&corpora[lang], plan.seq_len, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            lm_step_loss(stack, g, b, &TokenBatch::from_rows(&rows)?)
        },
        |step, parts| {
            if ckpt_steps.contains(&step) {
                on_checkpoint(step, parts.model)?;
            }
            Ok(())
        },
    )?;
    Ok(PretrainOutcome { model, losses })
}

/// Adapted model, its adapter bank (if the strategy has one) and the loss
/// curve across all phases.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: ModelParams,
    pub adapters: Option<AdapterBank>,
    pub losses: Vec<f64>,
    /// Step index at which each phase began.
    pub phase_starts: Vec<usize>,
}

/// Adapt `base` to a new language: replace `wte` with a fresh table sized to
/// `new_vocab`, inject zero-initialized adapters when the strategy uses them,
/// then run each phase of `spec` training only that phase's tensors.
/// `plan.steps` must equal the strategy's total budget.
pub fn adapt(
    base: &ModelParams,
    new_vocab: &BpeVocab,
    corpus: &[u32],
    spec: &StrategySpec,
    plan: &TrainPlan,
    language: &str,
) -> Result<AdaptOutcome> {
    spec.validate()?;
    plan.validate(base.config())?;
    if plan.steps != spec.total_steps() {
        return Err(Error::Config(format!(
            "plan budget {} does not match strategy budget {}",
            plan.steps,
            spec.total_steps()
        )));
    }
    if let Some(&bad) = corpus.iter().find(|&&id| id as usize >= new_vocab.vocab_size()) {
        return Err(Error::Config(format!(
            "corpus id {bad} does not fit the new vocab of {} tokens",
            new_vocab.vocab_size()
        )));
    }
    if spec.total_steps() > 0 && corpus.len() < plan.seq_len {
        return Err(Error::Data(format!(
            "adaptation corpus has {} tokens, fewer than seq_len {}",
            corpus.len(),
            plan.seq_len
        )));
    }
    let mut model = base.with_new_vocab(new_vocab.vocab_size(), mix_seed(plan.seed, 0x77e))?;
    let mut adapters = if spec.strategy.uses_adapters() {
        Some(AdapterBank::new(model.config(), spec.adapter, language, mix_seed(plan.seed, 0xada))?)
    } else {
        None
    };
    let mut losses = Vec::new();
    let mut phase_starts = Vec::new();
    for (phase, &steps) in spec.steps.iter().enumerate() {
        phase_starts.push(losses.len());
        let trainable = spec.trainable_set(phase, model.config())?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(plan.seed, 0xda7a + phase as u64));
        let mut parts = Parts {
            model: &mut model,
            adapters: adapters.as_mut(),
            task: None,
        };
        let settings = PhaseSettings {
            steps,
            schedule: plan.schedule,
            lr_peak: plan.lr_peak,
            optimizer: plan.optimizer,
        };
        let offset = losses.len();
        let curve = run_phase(
            &mut parts,
            &trainable,
            settings,
            |stack, g, b, _| {
                let batch = sample_batch(corpus, plan.seq_len, plan.batch_size, &mut rng)?;
                lm_step_loss(stack, g, b, &batch)
            },
            |_, _| Ok(()),
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("phase {phase} (global offset {offset}): {msg}")),
            other => other,
        })?;
        losses.extend(curve);
    }
    Ok(AdaptOutcome {
        model,
        adapters,
        losses,
        phase_starts,
    })
}

/// Next-token negative log-likelihoods (nats) for each position `1..n` of
/// every sequence. Equal-length sequences are batched together.
pub fn token_nlls(stack: &Stack<'_>, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); seqs.len()];
    let mut by_len: IndexMap<usize, Vec<usize>> = IndexMap::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Data(format!("sequence {i} has fewer than two tokens")));
        }
        by_len.entry(s.len()).or_default().push(i);
    }
    for (len, idx) in by_len {
        for group in idx.chunks(16) {
            let rows: Vec<Vec<u32>> = group.iter().map(|&i| seqs[i].clone()).collect();
            let batch = TokenBatch::from_rows(&rows)?;
            let logits = stack.forward_logits(&batch)?;
            let v = logits.last_dim();
            for (r, &i) in group.iter().enumerate() {
                out[i] = (0..len - 1)
                    .map(|t| {
                        let row = &logits.data()[(r * len + t) * v..(r * len + t + 1) * v];
                        -log_softmax_at(row, seqs[i][t + 1] as usize)
                    })
                    .collect();
            }
        }
    }
    Ok(out)
}

/// `log softmax(row)[target]`, accumulated in f64.
pub fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target] as f64 - lse
}

/// `exp(mean next-token NLL)` over all chunks.
pub fn perplexity(stack: &Stack<'_>, chunks: &[Vec<u32>]) -> Result<f64> {
    let nlls = token_nlls(stack, chunks)?;
    let (sum, n) = nlls.iter().flatten().fold((0.0, 0usize), |(s, n), &x| (s + x, n + 1));
    if n == 0 {
        return Err(Error::Data("no tokens to score".into()));
    }
    Ok((sum / n as f64).exp())
}

/// `exp(total NLL / predicted bytes)`: comparable across tokenizers.
pub fn byte_perplexity(stack: &Stack<'_>, vocab: &BpeVocab, chunks: &[Vec<u32>]) -> Result<f64> {
    let nlls = token_nlls(stack, chunks)?;
    let mut total = 0.0;
    let mut bytes = 0usize;
    for (chunk, nll) in chunks.iter().zip(&nlls) {
        total += nll.iter().sum::<f64>();
        bytes += chunk[1..]
            .iter()
            .map(|&id| vocab.token_bytes(id).map_or(0, <[u8]>::len))
            .sum::<usize>();
    }
    if bytes == 0 {
        return Err(Error::Data("no bytes to score".into()));
    }
    Ok((total / bytes as f64).exp())
}

/// Named hyperparameter bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    #[serde(alias = "paper")]
    Full,
    Desk,
}

impl std::str::FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "paper" => Ok(PresetName::Full),
            "desk" => Ok(PresetName::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (full, desk)"))),
        }
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PresetName::Full => "full",
            PresetName::Desk => "desk",
        })
    }
}

/// Full-scale pretraining samples and the batch size used to turn them
/// into optimizer steps.
pub const REFERENCE_DECAY_SAMPLES: usize = 16_927_083;
pub const REFERENCE_WARMUP_SAMPLES: usize = 216_320;
pub const REFERENCE_PRETRAIN_BATCH: usize = 512;
/// Checkpoint steps studied at full scale.
pub const REFERENCE_CHECKPOINT_STEPS: [usize; 3] = [12_000, 100_500, 118_500];

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: PresetName,
    pub model: ModelConfig,
    pub pretrain: TrainPlan,
    /// Adaptation plan; `steps` is the total budget across phases.
    pub adapt: TrainPlan,
    pub task: crate::evaluation::TaskHyper,
    pub reduction: usize,
    pub vocab_size: usize,
}

impl Preset {
    pub fn get(name: PresetName) -> Self {
        match name {
            PresetName::Full => Self::full(),
            PresetName::Desk => Self::desk(),
        }
    }

    /// Full-scale values. Sample counts convert to steps by dividing by the
    /// pretraining batch size (rounded to nearest).
    pub fn full() -> Self {
        let to_steps = |samples: usize| (samples + REFERENCE_PRETRAIN_BATCH / 2) / REFERENCE_PRETRAIN_BATCH;
        let model = ModelConfig::full();
        let decay_steps = to_steps(REFERENCE_DECAY_SAMPLES);
        Self {
            name: PresetName::Full,
            pretrain: TrainPlan {
                steps: decay_steps,
                batch_size: REFERENCE_PRETRAIN_BATCH,
                seq_len: model.max_positions,
                schedule: Schedule::CosineWithWarmup {
                    warmup_steps: to_steps(REFERENCE_WARMUP_SAMPLES),
                },
                lr_peak: 2e-4,
                optimizer: AdamWConfig {
                    weight_decay: 0.1,
                    clip_norm: Some(1.0),
                    ..AdamWConfig::default()
                },
                checkpoints: CheckpointPolicy::At(REFERENCE_CHECKPOINT_STEPS.to_vec()),
                seed: 0,
            },
            adapt: TrainPlan {
                steps: 50_000,
                batch_size: 8,
                seq_len: 1024,
                schedule: Schedule::LinearDecay,
                lr_peak: 1e-3,
                optimizer: AdamWConfig::default(),
                checkpoints: CheckpointPolicy::FinalOnly,
                seed: 0,
            },
            task: crate::evaluation::TaskHyper::full(),
            reduction: 16,
            vocab_size: 130_000,
            model,
        }
    }

    /// Scaled-down values for the 141k-parameter model: step budgets shrink,
    /// ratios (warmup fraction, 50/50 phase split) are kept.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            name: PresetName::Desk,
            pretrain: TrainPlan {
                steps: 2_000,
                batch_size: 16,
                seq_len: 64,
                schedule: Schedule::CosineWithWarmup { warmup_steps: 26 },
                lr_peak: 3e-3,
                optimizer: AdamWConfig {
                    weight_decay: 0.1,
                    clip_norm: Some(1.0),
                    ..AdamWConfig::default()
                },
                checkpoints: CheckpointPolicy::Every(500),
                seed: 0,
            },
            adapt: TrainPlan {
                steps: 500,
                batch_size: 8,
                seq_len: 64,
                schedule: Schedule::LinearDecay,
                lr_peak: 3e-3,
                optimizer: AdamWConfig::default(),
                checkpoints: CheckpointPolicy::FinalOnly,
                seed: 0,
            },
            task: crate::evaluation::TaskHyper::desk(),
            reduction: 16,
            vocab_size: 512,
            model,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterConfig, EmbeddingSet, Strategy};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            vocab_size: 260,
            max_positions: 16,
            seed: 3,
        }
    }

    fn plan(steps: usize) -> TrainPlan {
        TrainPlan {
            steps,
            batch_size: 4,
            seq_len: 8,
            schedule: Schedule::Constant,
            lr_peak: 1e-2,
            optimizer: AdamWConfig::default(),
            checkpoints: CheckpointPolicy::FinalOnly,
            seed: 1,
        }
    }

    fn stream(n: usize) -> Vec<u32> {
        (0..n).map(|i| [97u32, 98, 99, 32][i % 4]).collect()
    }

    #[test]
    fn checkpoint_steps() {
        assert_eq!(CheckpointPolicy::Every(250).steps(1000), vec![250, 500, 750, 1000]);
        assert_eq!(CheckpointPolicy::Every(300).steps(1000), vec![300, 600, 900, 1000]);
        assert_eq!(CheckpointPolicy::At(vec![5, 50, 2]).steps(10), vec![2, 5, 10]);
        assert_eq!(CheckpointPolicy::FinalOnly.steps(7), vec![7]);
    }

    #[test]
    fn full_preset_conversions() {
        let p = Preset::full();
        assert_eq!(p.pretrain.steps, 33_061);
        assert_eq!(p.pretrain.schedule, Schedule::CosineWithWarmup { warmup_steps: 423 });
        assert_eq!(p.adapt.batch_size, 8);
        let spec = StrategySpec::new(Strategy::EmbThenAdpt, EmbeddingSet::Wte, p.adapt.steps, AdapterConfig::default());
        assert_eq!(spec.steps, vec![25_000, 25_000]);
    }

    #[test]
    fn repeated_token_loss_goes_to_zero() {
        let cfg = ModelConfig { max_positions: 32, ..tiny() };
        let corpora: IndexMap<String, Vec<u32>> = [("a".to_string(), vec![97u32; 200])].into_iter().collect();
        let p = TrainPlan {
            steps: 200,
            seq_len: 16,
            lr_peak: 1e-2,
            ..plan(200)
        };
        let out = pretrain(&cfg, &corpora, &SamplingTable::only("a"), &p, |_, _| Ok(())).unwrap();
        assert!(*out.losses.last().unwrap() < 0.1, "{:?}", &out.losses[190..]);
    }

    #[test]
    fn pretrain_checkpoints_and_determinism() {
        let corpora: IndexMap<String, Vec<u32>> =
            [("x".to_string(), stream(400)), ("y".to_string(), stream(300))].into_iter().collect();
        let table = SamplingTable::new([("x", 0.5), ("y", 0.5)]).unwrap();
        let p = TrainPlan {
            checkpoints: CheckpointPolicy::Every(4),
            ..plan(12)
        };
        let mut seen = vec![];
        let a = pretrain(&tiny(), &corpora, &table, &p, |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![4, 8, 12]);
        let b = pretrain(&tiny(), &corpora, &table, &p, |_, _| Ok(())).unwrap();
        assert!(a.model.bitwise_eq_all(&b.model));
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn missing_language_is_a_data_error() {
        let corpora: IndexMap<String, Vec<u32>> = [("x".to_string(), stream(100))].into_iter().collect();
        let table = SamplingTable::new([("x", 0.5), ("z", 0.5)]).unwrap();
        let err = pretrain(&tiny(), &corpora, &table, &plan(2), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let empty: IndexMap<String, Vec<u32>> = [("x".to_string(), vec![])].into_iter().collect();
        let err = pretrain(&tiny(), &empty, &SamplingTable::only("x"), &plan(2), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn zero_step_adapt_is_reinit_only() {
        let base = ModelParams::build(&tiny()).unwrap();
        let vocab = BpeVocab::from_parts(vec![(97, 98)], vec![]).unwrap();
        let spec = StrategySpec::new(Strategy::EmbThenAdpt, EmbeddingSet::WteWpe, 0, AdapterConfig::with_reduction(4));
        let out = adapt(&base, &vocab, &stream(50), &spec, &plan(0), "b").unwrap();
        let fresh = base.with_new_vocab(257, mix_seed(1, 0x77e)).unwrap();
        assert!(out.model.bitwise_eq_all(&fresh));
        let bank = out.adapters.unwrap();
        let fresh_bank = AdapterBank::new(fresh.config(), spec.adapter, "b", mix_seed(1, 0xada)).unwrap();
        assert!(bank.bitwise_eq_all(&fresh_bank));
        assert!(bank.tensors().iter().filter(|(n, _)| n.contains("up")).all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn adapt_freezes_everything_else() {
        let base = ModelParams::build(&tiny()).unwrap();
        let vocab = BpeVocab::bytes_only();
        let spec = StrategySpec::new(Strategy::EmbThenAdpt, EmbeddingSet::Wte, 10, AdapterConfig::with_reduction(4));
        let out = adapt(&base, &vocab, &stream(100), &spec, &plan(10), "b").unwrap();
        assert_eq!(out.phase_starts, vec![0, 5]);
        for (name, t) in base.tensors() {
            if name != "wte" {
                assert!(t.bitwise_eq(out.model.get(name).unwrap()), "{name}");
            }
        }
        assert!(out.adapters.unwrap().tensors()["layer0.adpt.up"].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn adapt_rejects_mismatches() {
        let base = ModelParams::build(&tiny()).unwrap();
        let spec = StrategySpec::new(Strategy::EmbOnly, EmbeddingSet::Wte, 4, AdapterConfig::default());
        let vocab = BpeVocab::bytes_only();
        assert!(matches!(adapt(&base, &vocab, &stream(50), &spec, &plan(5), "b"), Err(Error::Config(_))));
        assert!(matches!(adapt(&base, &vocab, &[300, 1, 2], &spec, &plan(4), "b"), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let base = ModelParams::build(&tiny()).unwrap();
        let spec = StrategySpec::new(Strategy::EmbOnly, EmbeddingSet::Wte, 5, AdapterConfig::default());
        let p = TrainPlan {
            lr_peak: 1e30,
            ..plan(5)
        };
        let err = adapt(&base, &BpeVocab::bytes_only(), &stream(100), &spec, &p, "b").unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("step")), "{err}");
    }

    #[test]
    fn perplexity_of_uniform_model() {
        let mut m = ModelParams::build(&tiny()).unwrap();
        m.get_mut("wte").unwrap().data_mut().fill(0.0);
        let chunks = chunk_stream(&stream(30), 8);
        let ppl = perplexity(&Stack::base(&m), &chunks).unwrap();
        assert!((ppl - 260.0).abs() < 1e-3, "{ppl}");
        // every byte token expands to one byte
        let bp = byte_perplexity(&Stack::base(&m), &BpeVocab::bytes_only(), &chunks).unwrap();
        assert!((bp - ppl).abs() < 1e-9);
    }
}
