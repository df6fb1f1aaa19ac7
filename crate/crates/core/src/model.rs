//! GPT-style decoder: learned token and position embeddings, pre-norm
//! blocks (LN → attention → residual, LN → FFN → adapters → residual), a
//! final layer norm and an LM head tied to `wte`.

use std::collections::{BTreeSet, HashMap};

use numcore::{grad_check_with, Graph, GradCheckConfig, Init, Tensor, TensorCheck, Var};
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterBank};
use crate::error::{Error, Result};
use crate::evaluation::TaskHead;
use crate::params::{self, count_specs, weight, NamedTensors, ParamCounts, TensorSpec};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The 141,056-parameter configuration used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ffn: 256,
            vocab_size: 512,
            max_positions: 128,
            seed: 0,
        }
    }

    /// 24 layers, 16 heads, d=2048, FFN 8192, 130k vocab, 1,024 positions.
    pub fn full() -> Self {
        Self {
            n_layers: 24,
            n_heads: 16,
            d_model: 2048,
            d_ffn: 8192,
            vocab_size: 130_000,
            max_positions: 1024,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every backbone tensor in canonical (checkpoint) order. No head tensor:
    /// the LM head is `wte`.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let (d, f) = (self.d_model, self.d_ffn);
        let mut specs = vec![
            TensorSpec::new("wte", &[self.vocab_size, d], weight()),
            TensorSpec::new("wpe", &[self.max_positions, d], weight()),
        ];
        for i in 0..self.n_layers {
            let p = format!("layer{i}");
            let mut push = |n: &str, shape: &[usize], init| specs.push(TensorSpec::new(format!("{p}.{n}"), shape, init));
            push("ln1.weight", &[d], Init::Constant(1.0));
            push("ln1.bias", &[d], Init::Zeros);
            for proj in ["q", "k", "v", "o"] {
                push(&format!("attn.{proj}.weight"), &[d, d], weight());
                push(&format!("attn.{proj}.bias"), &[d], Init::Zeros);
            }
            push("ln2.weight", &[d], Init::Constant(1.0));
            push("ln2.bias", &[d], Init::Zeros);
            push("ffn.in.weight", &[d, f], weight());
            push("ffn.in.bias", &[f], Init::Zeros);
            push("ffn.out.weight", &[f, d], weight());
            push("ffn.out.bias", &[d], Init::Zeros);
        }
        specs.push(TensorSpec::new("ln_f.weight", &[d], Init::Constant(1.0)));
        specs.push(TensorSpec::new("ln_f.bias", &[d], Init::Zeros));
        specs
    }
}

/// Backbone parameters. Invariant: tensors match `config.tensor_specs()`
/// in name, order and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: NamedTensors,
}

impl ModelParams {
    /// Deterministic init from `config.seed`: weights N(0, 0.02), biases and
    /// LN shifts zero, LN scales one.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = params::materialize(&config.tensor_specs(), config.seed)?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub(crate) fn from_tensors(config: ModelConfig, tensors: NamedTensors) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        if specs.len() != tensors.len()
            || specs
                .iter()
                .zip(&tensors)
                .any(|(s, (n, t))| &s.name != n || s.shape != t.shape())
        {
            return Err(Error::Contract("tensor set does not match model config".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Replace one tensor; the name must exist and the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no model tensor named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Bitwise equality of every tensor and the config.
    pub fn bitwise_eq_all(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    /// Replace `wte` with a fresh N(0, 0.02) table for a new vocabulary.
    /// All other tensors are kept.
    pub fn with_new_vocab(&self, vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Config("vocab size must be >= 1".into()));
        }
        let mut out = self.clone();
        out.config.vocab_size = vocab_size;
        let wte = Tensor::init(&[vocab_size, self.config.d_model], weight(), params::mix_seed(seed, params::name_salt("wte")))?;
        out.tensors.insert("wte".into(), wte);
        Ok(out)
    }
}

/// A model plus whatever adapter layers sit on it for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Stack<'a> {
    pub model: &'a ModelParams,
    pub adapters: Option<&'a AdapterBank>,
    pub task: Option<&'a TaskHead>,
}

/// Graph leaves for every tensor in a [`Stack`], by name.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("tensor {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn bind_all(&mut self, g: &mut Graph, tensors: &NamedTensors, trainable: &BTreeSet<String>) {
        for (name, t) in tensors {
            let v = g.leaf(t.clone(), trainable.contains(name));
            self.vars.insert(name.clone(), v);
        }
    }
}

/// Equal-length token sequences, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Contract("empty token batch".into()));
        }
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Contract("ragged token batch".into()));
        }
        Ok(Self {
            ids: rows.concat(),
            batch: rows.len(),
            seq,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

impl<'a> Stack<'a> {
    pub fn base(model: &'a ModelParams) -> Self {
        Self {
            model,
            adapters: None,
            task: None,
        }
    }

    pub fn with_adapters(model: &'a ModelParams, adapters: Option<&'a AdapterBank>) -> Self {
        Self {
            model,
            adapters,
            task: None,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: &BTreeSet<String>) -> Bindings {
        let mut b = Bindings::default();
        b.bind_all(g, self.model.tensors(), trainable);
        if let Some(a) = self.adapters {
            b.bind_all(g, a.tensors(), trainable);
        }
        if let Some(t) = self.task {
            b.bind_all(g, t.tensors(), trainable);
        }
        b
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let cfg = self.model.config();
        if batch.seq > cfg.max_positions {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_positions {}",
                batch.seq, cfg.max_positions
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} out of range for vocab {}", cfg.vocab_size)));
        }
        Ok(())
    }

    /// Final hidden states `[batch·seq, d]`: after the final layer norm and,
    /// when an invertible adapter is present, its inverse.
    pub fn hidden(&self, g: &mut Graph, b: &Bindings, batch: &TokenBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let cfg = self.model.config();
        let (bs, t, d, h) = (batch.batch, batch.seq, cfg.d_model, cfg.n_heads);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..bs).flat_map(|_| 0..t).collect();
        let tok = g.embedding(b.get("wte")?, &ids)?;
        let pos = g.embedding(b.get("wpe")?, &positions)?;
        let mut x = g.add(tok, pos)?;
        let inv = match self.adapters {
            Some(a) => a.invertible_vars(b)?,
            None => None,
        };
        if let Some(inv) = &inv {
            x = adapters::invertible_forward_graph(g, inv, x)?;
        }
        for layer in 0..cfg.n_layers {
            let p = |n: &str| b.get(&format!("layer{layer}.{n}"));
            let hn = g.layer_norm(x, p("ln1.weight")?, p("ln1.bias")?, LN_EPS)?;
            let proj = |g: &mut Graph, name: &str| -> Result<Var> {
                let y = g.matmul(hn, p(&format!("attn.{name}.weight"))?)?;
                let y = g.add_bias(y, p(&format!("attn.{name}.bias"))?)?;
                let y = g.reshape(y, &[bs, t, h, d / h])?;
                Ok(g.permute(y, &[0, 2, 1, 3])?)
            };
            let (q, k, v) = (proj(g, "q")?, proj(g, "k")?, proj(g, "v")?);
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, 1.0 / ((d / h) as f32).sqrt())?;
            let attn = g.causal_softmax(scores)?;
            let ctx = g.bmm(attn, v, false)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[bs * t, d])?;
            let out = g.matmul(ctx, p("attn.o.weight")?)?;
            let out = g.add_bias(out, p("attn.o.bias")?)?;
            x = g.add(x, out)?;

            let hn = g.layer_norm(x, p("ln2.weight")?, p("ln2.bias")?, LN_EPS)?;
            let f = g.matmul(hn, p("ffn.in.weight")?)?;
            let f = g.add_bias(f, p("ffn.in.bias")?)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p("ffn.out.weight")?)?;
            let mut f = g.add_bias(f, p("ffn.out.bias")?)?;
            if let Some(a) = self.adapters.filter(|a| a.config().language) {
                f = adapters::bottleneck_graph(g, &a.language_vars(b, layer)?, f)?;
            }
            if let Some(task) = self.task {
                f = adapters::bottleneck_graph(g, &task.adapter_vars(b, layer)?, f)?;
            }
            x = g.add(x, f)?;
        }
        x = g.layer_norm(x, b.get("ln_f.weight")?, b.get("ln_f.bias")?, LN_EPS)?;
        if let Some(inv) = &inv {
            x = adapters::invertible_inverse_graph(g, inv, x)?;
        }
        Ok(x)
    }

    /// Logits `[batch·seq, vocab]` through the tied head `h · wteᵀ`.
    pub fn logits(&self, g: &mut Graph, b: &Bindings, batch: &TokenBatch) -> Result<Var> {
        let h = self.hidden(g, b, batch)?;
        Ok(g.matmul_nt(h, b.get("wte")?)?)
    }

    /// Mean next-token cross-entropy over all positions of all rows.
    pub fn lm_loss_graph(&self, g: &mut Graph, b: &Bindings, batch: &TokenBatch) -> Result<Var> {
        if batch.seq < 2 {
            return Err(Error::Contract("lm_loss needs sequences of length >= 2".into()));
        }
        let logits = self.logits(g, b, batch)?;
        let (rows, targets) = next_token_targets(batch);
        let picked = g.select_rows(logits, &rows)?;
        Ok(g.cross_entropy(picked, &targets)?)
    }

    /// Logits as a `[batch, seq, vocab]` tensor.
    pub fn forward_logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &BTreeSet::new());
        let logits = self.logits(&mut g, &b, batch)?;
        let v = self.model.config().vocab_size;
        Ok(g.value(logits).clone().reshaped(&[batch.batch, batch.seq, v])?)
    }

    pub fn lm_loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &BTreeSet::new());
        let loss = self.lm_loss_graph(&mut g, &b, batch)?;
        Ok(g.scalar(loss)?)
    }
}

/// Central-difference check of the LM-loss gradient of every tensor in the
/// stack (backbone, adapters and task head alike), one entry per tensor.
pub fn grad_check_lm(stack: &Stack<'_>, batch: &TokenBatch, cfg: &GradCheckConfig) -> Result<Vec<(String, TensorCheck)>> {
    let mut names: Vec<String> = stack.model.tensors().keys().cloned().collect();
    if let Some(a) = stack.adapters {
        names.extend(a.tensors().keys().cloned());
    }
    let all: BTreeSet<String> = names.iter().cloned().collect();
    let mut g = Graph::new();
    let b = stack.bind(&mut g, &all);
    let loss = stack.lm_loss_graph(&mut g, &b, batch)?;
    g.backward(loss)?;
    let lookup = |n: &str| {
        stack
            .model
            .get(n)
            .or_else(|| stack.adapters.and_then(|a| a.tensors().get(n)))
            .expect("name taken from the stack")
    };
    let params: Vec<Tensor> = names.iter().map(|n| lookup(n).clone()).collect();
    let analytic = names
        .iter()
        .zip(&params)
        .map(|(n, p)| Ok(g.grad(b.get(n)?).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()))))
        .collect::<Result<Vec<_>>>()?;
    let n_model = stack.model.tensors().len();
    let eval = |ps: &[Tensor]| -> numcore::Result<f64> {
        let mut model = stack.model.clone();
        let mut adapters = stack.adapters.cloned();
        for (i, (n, t)) in names.iter().zip(ps).enumerate() {
            if i < n_model {
                *model.get_mut(n).expect("model tensor") = t.clone();
            } else if let Some(a) = adapters.as_mut() {
                *a.tensors_mut().get_mut(n).expect("adapter tensor") = t.clone();
            }
        }
        let s = Stack {
            model: &model,
            adapters: adapters.as_ref(),
            task: stack.task,
        };
        s.lm_loss(batch).map_err(|e| match e {
            Error::Num(n) => n,
            other => numcore::NumError::Contract(other.to_string()),
        })
    };
    let report = grad_check_with(eval, &params, &analytic, cfg)?;
    Ok(names.into_iter().zip(report.tensors).collect())
}

/// Rows of the flattened logits predicting a next token, and those tokens.
pub(crate) fn next_token_targets(batch: &TokenBatch) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::with_capacity(batch.batch * (batch.seq - 1));
    let mut targets = Vec::with_capacity(rows.capacity());
    for b in 0..batch.batch {
        for t in 0..batch.seq - 1 {
            rows.push(b * batch.seq + t);
            targets.push(batch.ids[b * batch.seq + t + 1] as usize);
        }
    }
    (rows, targets)
}

/// Parameter accounting over a configuration's layout, without allocating
/// any tensors. `trainable` narrows the trainable count.
pub fn count_params(
    config: &ModelConfig,
    adapters: Option<&adapters::AdapterConfig>,
    trainable: Option<&BTreeSet<String>>,
) -> ParamCounts {
    let mut specs = config.tensor_specs();
    if let Some(a) = adapters {
        specs.extend(a.tensor_specs(config.n_layers, config.d_model));
    }
    count_specs(specs.iter().map(|s| (s.name.as_str(), s.numel())), trainable)
}
