//! NLI evaluation in three settings:
//!
//! * zero-shot: fill a prompt template with each label's verbalizer and pick
//!   the rendering the LM scores highest (mean per-token log-prob);
//! * cross-lingual: a task head (task adapters + 3-way classifier) trained
//!   on the source language runs unchanged on a target model whose
//!   embeddings and language adapters were swapped in;
//! * supervised: the task head trains directly on target-language data.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numcore::{Graph, Init, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{bottleneck_specs, AdapterBank, BottleneckVars};
use crate::error::{Error, Result};
use crate::model::{Bindings, ModelConfig, ModelParams, Stack, TokenBatch};
use crate::params::{self, weight, NamedTensors, TensorSpec};
use crate::tokenizer::BpeVocab;
use crate::training::{log_softmax_at, run_phase, AdamWConfig, Parts, PhaseSettings, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Entailment,
    Contradiction,
    Neutral,
}

impl Label {
    /// Also the tie-break order.
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NLIExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
}

impl NLIExample {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>, label: Label) -> Result<Self> {
        let ex = Self {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            label,
        };
        if ex.premise.is_empty() || ex.hypothesis.is_empty() {
            return Err(Error::Data("premise and hypothesis must be non-empty".into()));
        }
        Ok(ex)
    }
}

/// Parse `premise<TAB>hypothesis<TAB>label` lines. Blank lines are skipped.
pub fn parse_nli_tsv(text: &str, name: &str) -> Result<Vec<NLIExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [p, h, l] = cols.as_slice() else {
            return Err(Error::format(name, format!("line {}: expected 3 tab-separated columns, got {}", i + 1, cols.len())));
        };
        let label = l.trim().parse().map_err(|e: Error| Error::format(name, format!("line {}: {e}", i + 1)))?;
        out.push(NLIExample::new(*p, *h, label).map_err(|e| Error::format(name, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn load_nli_tsv(path: &Path) -> Result<Vec<NLIExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nli_tsv(&text, &path.display().to_string())
}

pub fn nli_to_tsv(examples: &[NLIExample]) -> String {
    examples
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.premise, e.hypothesis, e.label))
        .collect()
}

const PREMISE: &str = "[premise]";
const MASK: &str = "[MASK]";
const HYPOTHESIS: &str = "[hypothesis]";

/// Pattern with `[premise]`, `[MASK]`, `[hypothesis]` slots and one
/// verbalizer per label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pattern: String,
    verbalizers: [String; 3],
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>, verbalizers: [&str; 3]) -> Result<Self> {
        let pattern = pattern.into();
        for slot in [PREMISE, MASK, HYPOTHESIS] {
            let n = pattern.matches(slot).count();
            if n != 1 {
                return Err(Error::Config(format!("template must contain {slot} exactly once, found {n}")));
            }
        }
        if verbalizers.iter().any(|v| v.is_empty()) {
            return Err(Error::Config("verbalizers must be non-empty".into()));
        }
        Ok(Self {
            pattern,
            verbalizers: verbalizers.map(str::to_string),
        })
    }

    /// Built-in templates: `en`, `de`, `ko`.
    pub fn builtin(lang: &str) -> Result<Self> {
        let text = match lang {
            "en" => include_str!("../data/templates/en.prompt"),
            "de" => include_str!("../data/templates/de.prompt"),
            "ko" => include_str!("../data/templates/ko.prompt"),
            _ => return Err(Error::Config(format!("no built-in template for {lang:?}"))),
        };
        Self::parse(text, lang)
    }

    /// Line 1 is the pattern; lines 2–4 are `label<TAB>verbalizer`.
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.lines();
        let pattern = lines.next().ok_or_else(|| Error::format(name, "empty template file"))?;
        let mut verbs: [Option<String>; 3] = Default::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (label, verb) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(name, format!("expected label<TAB>verbalizer, got {line:?}")))?;
            let label: Label = label.trim().parse().map_err(|e: Error| Error::format(name, e.to_string()))?;
            if verbs[label.index()].replace(verb.to_string()).is_some() {
                return Err(Error::format(name, format!("label {label} listed twice")));
            }
        }
        let [Some(e), Some(c), Some(n)] = verbs else {
            return Err(Error::format(name, "all three labels need a verbalizer"));
        };
        Self::new(pattern, [&e, &c, &n]).map_err(|e| Error::format(name, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.pattern);
        for l in Label::ALL {
            s.push_str(&format!("{l}\t{}\n", self.verbalizers[l.index()]));
        }
        s
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn verbalizer(&self, label: Label) -> &str {
        &self.verbalizers[label.index()]
    }

    /// Rendered text split around the verbalizer: `(prefix, verbalizer, suffix)`.
    pub fn segments(&self, ex: &NLIExample, label: Label) -> (String, String, String) {
        let fill = |s: &str| s.replace(PREMISE, &ex.premise).replace(HYPOTHESIS, &ex.hypothesis);
        let (before, after) = self.pattern.split_once(MASK).expect("validated pattern");
        (fill(before), self.verbalizer(label).to_string(), fill(after))
    }
}

pub fn render_prompt(template: &PromptTemplate, ex: &NLIExample, label: Label) -> String {
    let (a, v, b) = template.segments(ex, label);
    format!("{a}{v}{b}")
}

/// What the zero-shot score averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Every predicted token of the rendered prompt.
    #[default]
    WholePrompt,
    /// Only the verbalizer's tokens (segments are tokenized separately).
    VerbalizerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShot {
    pub label: Label,
    pub scores: [f64; 3],
}

/// First label with the maximal score.
pub fn argmax_label(scores: &[f64; 3]) -> Label {
    let mut best = 0;
    for i in 1..3 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Label::ALL[best]
}

fn check_vocab(model: &ModelConfig, vocab: &BpeVocab) -> Result<()> {
    if model.vocab_size != vocab.vocab_size() {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the model embeds {}",
            vocab.vocab_size(),
            model.vocab_size
        )));
    }
    Ok(())
}

/// Token ids of a rendered prompt plus the range of positions (as indices
/// of predicted tokens) that count toward the score.
fn prompt_ids(
    vocab: &BpeVocab,
    template: &PromptTemplate,
    ex: &NLIExample,
    label: Label,
    mode: ScoreMode,
) -> (Vec<u32>, std::ops::Range<usize>) {
    match mode {
        ScoreMode::WholePrompt => {
            let ids = vocab.encode_str(&render_prompt(template, ex, label));
            let n = ids.len();
            (ids, 1..n.max(1))
        }
        ScoreMode::VerbalizerOnly => {
            let (a, v, b) = template.segments(ex, label);
            let (a, v, b) = (vocab.encode_str(&a), vocab.encode_str(&v), vocab.encode_str(&b));
            let start = a.len().max(1);
            let end = a.len() + v.len();
            ([a, v, b].concat(), start..end.max(start))
        }
    }
}

/// Score each label's rendering and predict the argmax.
pub fn zero_shot_predict(
    stack: &Stack<'_>,
    vocab: &BpeVocab,
    template: &PromptTemplate,
    ex: &NLIExample,
    mode: ScoreMode,
) -> Result<ZeroShot> {
    check_vocab(stack.model.config(), vocab)?;
    let max_pos = stack.model.config().max_positions;
    let prompts: Vec<_> = Label::ALL.iter().map(|&l| prompt_ids(vocab, template, ex, l, mode)).collect();
    for (ids, span) in &prompts {
        if ids.len() < 2 || span.is_empty() {
            return Err(Error::Data("prompt tokenizes to fewer than two scorable tokens".into()));
        }
        if ids.len() > max_pos {
            return Err(Error::Data(format!("prompt of {} tokens exceeds max_positions {max_pos}", ids.len())));
        }
    }
    // causal: right padding leaves the scored positions untouched
    let width = prompts.iter().map(|(ids, _)| ids.len()).max().unwrap();
    let rows: Vec<Vec<u32>> = prompts
        .iter()
        .map(|(ids, _)| {
            let mut r = ids.clone();
            r.resize(width, 0);
            r
        })
        .collect();
    let logits = stack.forward_logits(&TokenBatch::from_rows(&rows)?)?;
    let v = logits.last_dim();
    let mut scores = [0.0; 3];
    for (r, (ids, span)) in prompts.iter().enumerate() {
        let lps: Vec<f64> = span
            .clone()
            .map(|t| {
                let at = (r * width + t - 1) * v;
                log_softmax_at(&logits.data()[at..at + v], ids[t] as usize)
            })
            .collect();
        // offset by the first term so equal per-token values give bit-equal
        // means whatever the length
        let first = lps[0];
        scores[r] = first + lps.iter().map(|l| l - first).sum::<f64>() / lps.len() as f64;
    }
    Ok(ZeroShot {
        label: argmax_label(&scores),
        scores,
    })
}

pub fn zero_shot_eval(
    stack: &Stack<'_>,
    vocab: &BpeVocab,
    template: &PromptTemplate,
    examples: &[NLIExample],
    mode: ScoreMode,
) -> Result<Accuracy> {
    let preds = examples
        .iter()
        .map(|ex| zero_shot_predict(stack, vocab, template, ex, mode).map(|z| z.label))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Label> = examples.iter().map(|e| e.label).collect();
    evaluate_accuracy(&preds, &gold)
}

/// Task-head training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seq_len: usize,
    /// Reduction factor of the task adapters.
    pub reduction: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl TaskHyper {
    pub fn full() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            lr: 5e-5,
            seq_len: 128,
            reduction: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            seq_len: 64,
            reduction: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Task adapters (one bottleneck per layer, applied after the language
/// adapter) and a 3-way linear classifier on the pooled hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    reduction: usize,
    n_layers: usize,
    d_model: usize,
    tensors: NamedTensors,
}

impl TaskHead {
    pub fn specs(n_layers: usize, d_model: usize, reduction: usize) -> Vec<TensorSpec> {
        let b = d_model / reduction.max(1);
        let mut specs: Vec<TensorSpec> = (0..n_layers)
            .flat_map(|i| bottleneck_specs(&format!("layer{i}.task"), d_model, b))
            .collect();
        specs.push(TensorSpec::new("head.weight", &[d_model, 3], weight()));
        specs.push(TensorSpec::new("head.bias", &[3], Init::Zeros));
        specs
    }

    pub fn new(model: &ModelConfig, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || model.d_model / reduction == 0 {
            return Err(Error::Config(format!(
                "task reduction {reduction} leaves no bottleneck units at d_model {}",
                model.d_model
            )));
        }
        let specs = Self::specs(model.n_layers, model.d_model, reduction);
        Ok(Self {
            reduction,
            n_layers: model.n_layers,
            d_model: model.d_model,
            tensors: params::materialize(&specs, params::mix_seed(seed, 0x7a5c))?,
        })
    }

    pub(crate) fn from_tensors(n_layers: usize, d_model: usize, reduction: usize, tensors: NamedTensors) -> Result<Self> {
        let specs = Self::specs(n_layers, d_model, reduction);
        if specs.len() != tensors.len() || specs.iter().zip(&tensors).any(|(s, (n, t))| &s.name != n || s.shape != t.shape()) {
            return Err(Error::Contract("tensor set does not match task head layout".into()));
        }
        Ok(Self {
            reduction,
            n_layers,
            d_model,
            tensors,
        })
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut NamedTensors {
        &mut self.tensors
    }

    pub fn adapter_vars(&self, b: &Bindings, layer: usize) -> Result<BottleneckVars> {
        BottleneckVars::bind(b, &format!("layer{layer}.task"))
    }

    fn check_fits(&self, model: &ModelConfig) -> Result<()> {
        if self.d_model != model.d_model || self.n_layers != model.n_layers {
            return Err(Error::Config(format!(
                "task head built for {} layers × d={} cannot run on {} layers × d={}",
                self.n_layers, self.d_model, model.n_layers, model.d_model
            )));
        }
        Ok(())
    }
}

/// `premise ⧺ " | " ⧺ hypothesis`, trimmed to `seq_len` tokens by cutting
/// the end of the currently longer side (premise on ties) one token at a
/// time.
pub fn encode_pair(vocab: &BpeVocab, ex: &NLIExample, seq_len: usize) -> Vec<u32> {
    let mut p = vocab.encode_str(&ex.premise);
    let mut h = vocab.encode_str(&ex.hypothesis);
    let sep = vocab.encode_str(PAIR_SEPARATOR);
    while p.len() + sep.len() + h.len() > seq_len && (!p.is_empty() || !h.is_empty()) {
        if p.len() >= h.len() {
            p.pop();
        } else {
            h.pop();
        }
    }
    let mut ids = p;
    ids.extend(sep);
    ids.extend(h);
    ids.truncate(seq_len);
    ids
}

pub const PAIR_SEPARATOR: &str = " | ";

/// Right-padded batch plus the flattened row index of each sequence's last
/// real token.
fn pad_batch(seqs: &[&Vec<u32>], pad: u32) -> Result<(TokenBatch, Vec<usize>)> {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    if width == 0 || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Data("empty classification input".into()));
    }
    let rows: Vec<Vec<u32>> = seqs
        .iter()
        .map(|s| {
            let mut r = (*s).clone();
            r.resize(width, pad);
            r
        })
        .collect();
    let last = seqs.iter().enumerate().map(|(b, s)| b * width + s.len() - 1).collect();
    Ok((TokenBatch::from_rows(&rows)?, last))
}

fn class_logits(stack: &Stack<'_>, g: &mut Graph, b: &Bindings, batch: &TokenBatch, last: &[usize]) -> Result<Var> {
    let h = stack.hidden(g, b, batch)?;
    let pooled = g.select_rows(h, last)?;
    let z = g.matmul(pooled, b.get("head.weight")?)?;
    Ok(g.add_bias(z, b.get("head.bias")?)?)
}

fn pad_id(vocab: &BpeVocab) -> u32 {
    vocab.pad_id().unwrap_or(0)
}

/// Classifier logits `[n × 3]` for encoded inputs.
pub fn classify(stack: &Stack<'_>, vocab: &BpeVocab, examples: &[NLIExample], seq_len: usize) -> Result<Tensor> {
    let head = stack.task.ok_or_else(|| Error::Contract("classification needs a task head".into()))?;
    head.check_fits(stack.model.config())?;
    check_vocab(stack.model.config(), vocab)?;
    let encoded: Vec<Vec<u32>> = examples.iter().map(|e| encode_pair(vocab, e, seq_len)).collect();
    let mut out = Vec::with_capacity(examples.len() * 3);
    for chunk in encoded.chunks(32) {
        let refs: Vec<&Vec<u32>> = chunk.iter().collect();
        let (batch, last) = pad_batch(&refs, pad_id(vocab))?;
        let mut g = Graph::new();
        let b = stack.bind(&mut g, &BTreeSet::new());
        let z = class_logits(stack, &mut g, &b, &batch, &last)?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(Tensor::new(vec![examples.len(), 3], out)?)
}

pub fn predict(stack: &Stack<'_>, vocab: &BpeVocab, examples: &[NLIExample], seq_len: usize) -> Result<Vec<Label>> {
    if examples.is_empty() {
        return Ok(vec![]);
    }
    let z = classify(stack, vocab, examples, seq_len)?;
    Ok(z
        .data()
        .chunks(3)
        .map(|r| argmax_label(&[r[0] as f64, r[1] as f64, r[2] as f64]))
        .collect())
}

/// Train task adapters and classifier with everything else frozen.
/// Returns the trained head and the per-step losses.
pub fn train_task_head(
    model: &ModelParams,
    lang_adapters: Option<&AdapterBank>,
    head: TaskHead,
    vocab: &BpeVocab,
    data: &[NLIExample],
    hyper: &TaskHyper,
) -> Result<(TaskHead, Vec<f64>)> {
    head.check_fits(model.config())?;
    check_vocab(model.config(), vocab)?;
    if data.is_empty() {
        return Err(Error::Data("task training set is empty".into()));
    }
    if hyper.batch_size == 0 || hyper.seq_len < 2 || hyper.seq_len > model.config().max_positions {
        return Err(Error::Config(format!(
            "task batch_size must be >= 1 and seq_len within 2..={}",
            model.config().max_positions
        )));
    }
    let encoded: Vec<Vec<u32>> = data.iter().map(|e| encode_pair(vocab, e, hyper.seq_len)).collect();
    let per_epoch = data.len().div_ceil(hyper.batch_size);
    let steps = hyper.epochs * per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params::mix_seed(hyper.seed, 0x5af));

    // frozen copies: only the head is written by the loop
    let mut model = model.clone();
    let mut bank = lang_adapters.cloned();
    let mut head = head;
    let trainable: BTreeSet<String> = head.tensors().keys().cloned().collect();
    let mut parts = Parts {
        model: &mut model,
        adapters: bank.as_mut(),
        task: Some(&mut head),
    };
    let settings = PhaseSettings {
        steps,
        schedule: Schedule::LinearDecay,
        lr_peak: hyper.lr,
        optimizer: hyper.optimizer,
    };
    let pad = pad_id(vocab);
    let losses = run_phase(
        &mut parts,
        &trainable,
        settings,
        |stack, g, b, step| {
            let k = step % per_epoch;
            if k == 0 {
                order.shuffle(&mut rng);
            }
            let idx = &order[k * hyper.batch_size..((k + 1) * hyper.batch_size).min(order.len())];
            let seqs: Vec<&Vec<u32>> = idx.iter().map(|&i| &encoded[i]).collect();
            let (batch, last) = pad_batch(&seqs, pad)?;
            let z = class_logits(stack, g, b, &batch, &last)?;
            let targets: Vec<usize> = idx.iter().map(|&i| data[i].label.index()).collect();
            Ok(g.cross_entropy(z, &targets)?)
        },
        |_, _| Ok(()),
    )?;
    Ok((head, losses))
}

/// Embeddings, language adapters and tokenizer for one language.
#[derive(Debug, Clone, Copy)]
pub struct LanguageSide<'a> {
    pub model: &'a ModelParams,
    pub adapters: Option<&'a AdapterBank>,
    pub vocab: &'a BpeVocab,
}

impl<'a> LanguageSide<'a> {
    fn stack(&self, head: &'a TaskHead) -> Stack<'a> {
        Stack {
            model: self.model,
            adapters: self.adapters,
            task: Some(head),
        }
    }
}

/// Accuracy of a source-trained head on a target language after swapping in
/// the target's tokenizer, embeddings and language adapters.
pub fn cross_lingual_eval(
    source_head: &TaskHead,
    target: LanguageSide<'_>,
    eval: &[NLIExample],
    seq_len: usize,
) -> Result<Accuracy> {
    let preds = predict(&target.stack(source_head), target.vocab, eval, seq_len)?;
    let gold: Vec<Label> = eval.iter().map(|e| e.label).collect();
    evaluate_accuracy(&preds, &gold)
}

/// Train a head on `side`'s training data and evaluate on its test data.
pub fn supervised_eval(
    side: LanguageSide<'_>,
    train: &[NLIExample],
    test: &[NLIExample],
    hyper: &TaskHyper,
) -> Result<(Accuracy, TaskHead)> {
    let head = TaskHead::new(side.model.config(), hyper.reduction, hyper.seed)?;
    let (head, _) = train_task_head(side.model, side.adapters, head, side.vocab, train, hyper)?;
    let acc = cross_lingual_eval(&head, side, test, hyper.seq_len)?;
    Ok((acc, head))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

pub fn evaluate_accuracy(predictions: &[Label], gold: &[Label]) -> Result<Accuracy> {
    if predictions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, g) in predictions.iter().zip(gold) {
        confusion[g.index()][p.index()] += 1;
    }
    let correct = (0..3).map(|i| confusion[i][i]).sum();
    let total = gold.len();
    Ok(Accuracy {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        confusion,
    })
}

/// One line of an evaluation results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub setting: String,
    pub model: String,
    pub dataset: String,
    pub accuracy: f64,
}

pub fn results_tsv(rows: &[ResultRow]) -> String {
    let mut s = String::from("setting\tmodel\tdataset\taccuracy\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{:.4}\n", r.setting, r.model, r.dataset, r.accuracy));
    }
    s
}
