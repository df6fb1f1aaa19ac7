//! Parameter-efficient adaptation layers.
//!
//! * Bottleneck (language or task) adapter: `h + up(relu(down(h)))`, with
//!   `down: [d × ⌊d/r⌋]`. One per transformer layer, applied to the FFN
//!   output before the residual add.
//! * Invertible adapter: NICE-style additive coupling on the two halves of
//!   the embedding, `v1 = e1 + F(e2)`, `v2 = e2 + G(v1)`, with `F`, `G`
//!   two-layer ReLU nets. The forward wraps the summed token+position
//!   embedding; the exact inverse runs on the final hidden state (after the
//!   final layer norm) right before the tied head.
//!
//! All up-projections start at zero so a fresh bank is an exact identity.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use numcore::{Graph, Init, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bindings, ModelConfig, ModelParams};
use crate::params::{self, weight, NamedTensors, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Bottleneck reduction factor `r`.
    pub reduction: usize,
    /// Reduction of the coupling nets relative to `d/2`.
    pub inv_reduction: usize,
    pub invertible: bool,
    pub language: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            inv_reduction: 2,
            invertible: true,
            language: true,
        }
    }
}

impl AdapterConfig {
    pub fn with_reduction(reduction: usize) -> Self {
        Self {
            reduction,
            ..Self::default()
        }
    }

    pub fn bottleneck_dim(&self, d_model: usize) -> usize {
        d_model / self.reduction.max(1)
    }

    pub fn coupling_dim(&self, d_model: usize) -> usize {
        (d_model / 2) / self.inv_reduction.max(1)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.reduction == 0 || self.inv_reduction == 0 {
            return Err(Error::Config("adapter reduction factors must be >= 1".into()));
        }
        if self.language && self.bottleneck_dim(d_model) == 0 {
            return Err(Error::Config(format!(
                "reduction {} leaves no bottleneck units at d_model {d_model}",
                self.reduction
            )));
        }
        if self.invertible {
            if d_model % 2 != 0 {
                return Err(Error::Config(format!("invertible adapter needs an even d_model, got {d_model}")));
            }
            if self.coupling_dim(d_model) == 0 {
                return Err(Error::Config(format!(
                    "inv_reduction {} leaves no coupling units at d_model {d_model}",
                    self.inv_reduction
                )));
            }
        }
        Ok(())
    }

    pub fn tensor_specs(&self, n_layers: usize, d_model: usize) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        if self.invertible {
            let (half, c) = (d_model / 2, self.coupling_dim(d_model));
            specs.extend(bottleneck_specs("inv.F", half, c));
            specs.extend(bottleneck_specs("inv.G", half, c));
        }
        if self.language {
            let b = self.bottleneck_dim(d_model);
            for i in 0..n_layers {
                specs.extend(bottleneck_specs(&format!("layer{i}.adpt"), d_model, b));
            }
        }
        specs
    }
}

/// `down [d × b]`, `down_bias [b]`, `up [b × d]`, `up_bias [d]`; up is zero.
pub(crate) fn bottleneck_specs(prefix: &str, d: usize, b: usize) -> Vec<TensorSpec> {
    vec![
        TensorSpec::new(format!("{prefix}.down"), &[d, b], weight()),
        TensorSpec::new(format!("{prefix}.down_bias"), &[b], Init::Zeros),
        TensorSpec::new(format!("{prefix}.up"), &[b, d], Init::Zeros),
        TensorSpec::new(format!("{prefix}.up_bias"), &[d], Init::Zeros),
    ]
}

/// Graph handles of one bottleneck-shaped net.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckVars {
    pub down: Var,
    pub down_bias: Var,
    pub up: Var,
    pub up_bias: Var,
}

impl BottleneckVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Self {
            down: b.get(&format!("{prefix}.down"))?,
            down_bias: b.get(&format!("{prefix}.down_bias"))?,
            up: b.get(&format!("{prefix}.up"))?,
            up_bias: b.get(&format!("{prefix}.up_bias"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CouplingVars {
    pub f: BottleneckVars,
    pub g: BottleneckVars,
}

/// `up(relu(down(x)))` without the residual.
fn two_layer(g: &mut Graph, w: &BottleneckVars, x: Var) -> Result<Var> {
    let z = g.matmul(x, w.down)?;
    let z = g.add_bias(z, w.down_bias)?;
    let z = g.relu(z)?;
    let u = g.matmul(z, w.up)?;
    Ok(g.add_bias(u, w.up_bias)?)
}

pub fn bottleneck_graph(g: &mut Graph, w: &BottleneckVars, h: Var) -> Result<Var> {
    let u = two_layer(g, w, h)?;
    Ok(g.add(h, u)?)
}

fn halves(g: &mut Graph, x: Var) -> Result<(Var, Var, usize)> {
    let d = *g.shape(x).last().unwrap();
    if d % 2 != 0 {
        return Err(Error::Config(format!("invertible adapter needs an even width, got {d}")));
    }
    Ok((g.narrow_last(x, 0, d / 2)?, g.narrow_last(x, d / 2, d / 2)?, d / 2))
}

pub fn invertible_forward_graph(g: &mut Graph, w: &CouplingVars, e: Var) -> Result<Var> {
    let (e1, e2, _) = halves(g, e)?;
    let fe2 = two_layer(g, &w.f, e2)?;
    let v1 = g.add(e1, fe2)?;
    let gv1 = two_layer(g, &w.g, v1)?;
    let v2 = g.add(e2, gv1)?;
    Ok(g.concat_last(v1, v2)?)
}

pub fn invertible_inverse_graph(g: &mut Graph, w: &CouplingVars, v: Var) -> Result<Var> {
    let (v1, v2, _) = halves(g, v)?;
    let gv1 = two_layer(g, &w.g, v1)?;
    let e2 = g.sub(v2, gv1)?;
    let fe2 = two_layer(g, &w.f, e2)?;
    let e1 = g.sub(v1, fe2)?;
    Ok(g.concat_last(e1, e2)?)
}

/// Plain tensors of one bottleneck-shaped net.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckWeights {
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

impl BottleneckWeights {
    fn from_named(t: &NamedTensors, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            t.get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::Contract(format!("missing adapter tensor {prefix}.{n}")))
        };
        Ok(Self {
            down: get("down")?,
            down_bias: get("down_bias")?,
            up: get("up")?,
            up_bias: get("up_bias")?,
        })
    }

    fn leaves(&self, g: &mut Graph) -> BottleneckVars {
        BottleneckVars {
            down: g.constant(self.down.clone()),
            down_bias: g.constant(self.down_bias.clone()),
            up: g.constant(self.up.clone()),
            up_bias: g.constant(self.up_bias.clone()),
        }
    }

    fn width(&self) -> usize {
        self.down.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingWeights {
    pub f: BottleneckWeights,
    pub g: BottleneckWeights,
}

fn check_width(h: &Tensor, want: usize) -> Result<()> {
    if h.last_dim() != want {
        return Err(Error::Contract(format!(
            "adapter expects last dim {want}, got shape {:?}",
            h.shape()
        )));
    }
    Ok(())
}

/// `h + up(relu(down(h)))` on `[.., d]`.
pub fn bottleneck_forward(w: &BottleneckWeights, h: &Tensor) -> Result<Tensor> {
    check_width(h, w.width())?;
    let mut g = Graph::new();
    let vars = w.leaves(&mut g);
    let x = g.constant(h.clone());
    let y = bottleneck_graph(&mut g, &vars, x)?;
    Ok(g.value(y).clone())
}

pub fn invertible_forward(w: &CouplingWeights, e: &Tensor) -> Result<Tensor> {
    check_width(e, 2 * w.f.width())?;
    let mut g = Graph::new();
    let vars = CouplingVars {
        f: w.f.leaves(&mut g),
        g: w.g.leaves(&mut g),
    };
    let x = g.constant(e.clone());
    let y = invertible_forward_graph(&mut g, &vars, x)?;
    Ok(g.value(y).clone())
}

pub fn invertible_inverse(w: &CouplingWeights, v: &Tensor) -> Result<Tensor> {
    check_width(v, 2 * w.f.width())?;
    let mut g = Graph::new();
    let vars = CouplingVars {
        f: w.f.leaves(&mut g),
        g: w.g.leaves(&mut g),
    };
    let x = g.constant(v.clone());
    let y = invertible_inverse_graph(&mut g, &vars, x)?;
    Ok(g.value(y).clone())
}

/// Language adapters (and optionally the invertible adapter) for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    config: AdapterConfig,
    n_layers: usize,
    d_model: usize,
    language: String,
    tensors: NamedTensors,
}

impl AdapterBank {
    pub fn new(model: &ModelConfig, config: AdapterConfig, language: &str, seed: u64) -> Result<Self> {
        config.validate(model.d_model)?;
        let specs = config.tensor_specs(model.n_layers, model.d_model);
        Ok(Self {
            config,
            n_layers: model.n_layers,
            d_model: model.d_model,
            language: language.to_string(),
            tensors: params::materialize(&specs, params::mix_seed(seed, 0xada9))?,
        })
    }

    pub(crate) fn from_tensors(model: &ModelConfig, config: AdapterConfig, language: String, tensors: NamedTensors) -> Result<Self> {
        config.validate(model.d_model)?;
        let specs = config.tensor_specs(model.n_layers, model.d_model);
        if specs.len() != tensors.len() || specs.iter().zip(&tensors).any(|(s, (n, t))| &s.name != n || s.shape != t.shape()) {
            return Err(Error::Contract("tensor set does not match adapter config".into()));
        }
        Ok(Self {
            config,
            n_layers: model.n_layers,
            d_model: model.d_model,
            language,
            tensors,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut NamedTensors {
        &mut self.tensors
    }

    /// Replace one tensor; the name must exist and the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no adapter tensor named {name}")))?;
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

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn bottleneck(&self, layer: usize) -> Result<BottleneckWeights> {
        BottleneckWeights::from_named(&self.tensors, &format!("layer{layer}.adpt"))
    }

    pub fn coupling(&self) -> Result<CouplingWeights> {
        Ok(CouplingWeights {
            f: BottleneckWeights::from_named(&self.tensors, "inv.F")?,
            g: BottleneckWeights::from_named(&self.tensors, "inv.G")?,
        })
    }

    pub fn invertible_vars(&self, b: &Bindings) -> Result<Option<CouplingVars>> {
        if !self.config.invertible {
            return Ok(None);
        }
        Ok(Some(CouplingVars {
            f: BottleneckVars::bind(b, "inv.F")?,
            g: BottleneckVars::bind(b, "inv.G")?,
        }))
    }

    pub fn language_vars(&self, b: &Bindings, layer: usize) -> Result<BottleneckVars> {
        BottleneckVars::bind(b, &format!("layer{layer}.adpt"))
    }

    pub fn bitwise_eq_all(&self, other: &AdapterBank) -> bool {
        self.config == other.config
            && self.language == other.language
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }
}

/// Attach a freshly initialized bank to `model`. Fails if `slot` already
/// holds one.
pub fn inject_adapters<'a>(
    model: &ModelParams,
    slot: &'a mut Option<AdapterBank>,
    config: AdapterConfig,
    language: &str,
    seed: u64,
) -> Result<&'a AdapterBank> {
    if slot.is_some() {
        return Err(Error::Contract("an adapter bank is already injected".into()));
    }
    Ok(slot.insert(AdapterBank::new(model.config(), config, language, seed)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    EmbOnly,
    EmbThenAdpt,
    EmbAndAdpt,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::EmbOnly, Strategy::EmbThenAdpt, Strategy::EmbAndAdpt];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::EmbOnly => "emb-only",
            Strategy::EmbThenAdpt => "emb-then-adpt",
            Strategy::EmbAndAdpt => "emb-and-adpt",
        }
    }

    pub fn uses_adapters(self) -> bool {
        self != Strategy::EmbOnly
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (emb-only, emb-then-adpt, emb-and-adpt)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingSet {
    Wte,
    WteWpe,
}

impl EmbeddingSet {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            EmbeddingSet::Wte => &["wte"],
            EmbeddingSet::WteWpe => &["wte", "wpe"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingSet::Wte => "wte",
            EmbeddingSet::WteWpe => "wte,wpe",
        }
    }
}

impl fmt::Display for EmbeddingSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<&str> = s.split(',').map(str::trim).collect();
        parts.sort_unstable();
        parts.dedup();
        match parts.as_slice() {
            ["wte"] => Ok(EmbeddingSet::Wte),
            ["wpe", "wte"] => Ok(EmbeddingSet::WteWpe),
            _ => Err(Error::Config(format!("embedding set must be `wte` or `wte,wpe`, got {s:?}"))),
        }
    }
}

/// Which tensors train in which phase, and for how many steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub embeddings: EmbeddingSet,
    /// Step budget per phase.
    pub steps: Vec<usize>,
    pub adapter: AdapterConfig,
}

impl StrategySpec {
    /// Split `total_steps` into phases; Emb→Adpt gets an even split
    /// (first phase takes the smaller half on odd budgets).
    pub fn new(strategy: Strategy, embeddings: EmbeddingSet, total_steps: usize, adapter: AdapterConfig) -> Self {
        let steps = match strategy {
            Strategy::EmbThenAdpt => vec![total_steps / 2, total_steps - total_steps / 2],
            _ => vec![total_steps],
        };
        Self {
            strategy,
            embeddings,
            steps,
            adapter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = if self.strategy == Strategy::EmbThenAdpt { 2 } else { 1 };
        if self.steps.len() != want {
            return Err(Error::Config(format!(
                "{} takes {want} phase budget(s), got {}",
                self.strategy,
                self.steps.len()
            )));
        }
        Ok(())
    }

    pub fn phases(&self) -> usize {
        self.steps.len()
    }

    pub fn total_steps(&self) -> usize {
        self.steps.iter().sum()
    }

    pub fn adapter_names(&self, model: &ModelConfig) -> BTreeSet<String> {
        if !self.strategy.uses_adapters() {
            return BTreeSet::new();
        }
        self.adapter
            .tensor_specs(model.n_layers, model.d_model)
            .into_iter()
            .map(|s| s.name)
            .collect()
    }

    /// Tensors updated in `phase`; everything else stays frozen.
    pub fn trainable_set(&self, phase: usize, model: &ModelConfig) -> Result<BTreeSet<String>> {
        if phase >= self.phases() {
            return Err(Error::Contract(format!(
                "{} has {} phase(s), asked for phase {phase}",
                self.strategy,
                self.phases()
            )));
        }
        let emb: BTreeSet<String> = self.embeddings.names().iter().map(|s| s.to_string()).collect();
        Ok(match (self.strategy, phase) {
            (Strategy::EmbOnly, _) => emb,
            (Strategy::EmbThenAdpt, 0) => emb,
            (Strategy::EmbThenAdpt, _) => self.adapter_names(model),
            (Strategy::EmbAndAdpt, _) => emb.union(&self.adapter_names(model)).cloned().collect(),
        })
    }

    /// Union of all phases' trainable sets.
    pub fn all_trainable(&self, model: &ModelConfig) -> BTreeSet<String> {
        (0..self.phases())
            .flat_map(|p| self.trainable_set(p, model).expect("phase in range"))
            .collect()
    }
}
