//! Named parameter layout shared by the model, adapters, task heads and
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use numcore::{Init, Tensor};
use serde::Serialize;

use crate::error::Result;

pub type NamedTensors = IndexMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Wte,
    Wpe,
    Transformer,
    InvertibleAdapter,
    LanguageAdapters,
    TaskAdapters,
    TaskHead,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Wte => "wte",
            ParamGroup::Wpe => "wpe",
            ParamGroup::Transformer => "transformer",
            ParamGroup::InvertibleAdapter => "invertible_adapter",
            ParamGroup::LanguageAdapters => "language_adapters",
            ParamGroup::TaskAdapters => "task_adapters",
            ParamGroup::TaskHead => "task_head",
        }
    }

    /// Group of a tensor name under the naming scheme used throughout.
    pub fn of(name: &str) -> ParamGroup {
        if name == "wte" {
            ParamGroup::Wte
        } else if name == "wpe" {
            ParamGroup::Wpe
        } else if name.starts_with("inv.") {
            ParamGroup::InvertibleAdapter
        } else if name.contains(".adpt.") {
            ParamGroup::LanguageAdapters
        } else if name.contains(".task.") {
            ParamGroup::TaskAdapters
        } else if name.starts_with("head.") {
            ParamGroup::TaskHead
        } else {
            ParamGroup::Transformer
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn group(&self) -> ParamGroup {
        ParamGroup::of(&self.name)
    }
}

pub(crate) const WEIGHT_STD: f32 = 0.02;

pub(crate) fn weight() -> Init {
    Init::Normal {
        mean: 0.0,
        std: WEIGHT_STD,
    }
}

/// splitmix64; derives independent per-tensor seeds from one run seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn name_salt(name: &str) -> u64 {
    // FNV-1a, stable across builds
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub(crate) fn materialize(specs: &[TensorSpec], seed: u64) -> Result<NamedTensors> {
    specs
        .iter()
        .map(|s| Ok((s.name.clone(), Tensor::init(&s.shape, s.init, mix_seed(seed, name_salt(&s.name)))?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub by_group: BTreeMap<String, usize>,
}

/// Exact counts over a tensor layout; `trainable` is the size of the subset
/// named in `trainable` (everything when `None`).
pub fn count_specs<'a>(
    specs: impl IntoIterator<Item = (&'a str, usize)>,
    trainable: Option<&BTreeSet<String>>,
) -> ParamCounts {
    let mut counts = ParamCounts {
        total: 0,
        trainable: 0,
        by_group: BTreeMap::new(),
    };
    for (name, n) in specs {
        counts.total += n;
        if trainable.is_none_or(|t| t.contains(name)) {
            counts.trainable += n;
        }
        *counts.by_group.entry(ParamGroup::of(name).to_string()).or_default() += n;
    }
    counts
}

/// CRC-32 of a tensor's little-endian byte image.
pub fn checksum(t: &Tensor) -> u32 {
    crc32fast::hash(&t.to_le_bytes())
}
