//! Checkpoint directories: `manifest.json` (configs, pretraining step, tensor
//! table with offsets and CRC-32 checksums), `weights.bin` (little-endian f32,
//! tensors concatenated in manifest order) and an optional `vocab.bpe`.

use std::fs;
use std::path::Path;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, AdapterConfig};
use crate::error::{Error, Result};
use crate::evaluation::TaskHead;
use crate::fsutil::write_dir_atomic;
use crate::model::{ModelConfig, ModelParams};
use crate::params::{checksum, NamedTensors, TensorSpec};
use crate::tokenizer::BpeVocab;

pub const FORMAT: &str = "langadapt-checkpoint-v1";
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const VOCAB: &str = "vocab.bpe";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub adapters: Option<AdapterBank>,
    pub task_head: Option<TaskHead>,
    pub vocab: Option<BpeVocab>,
    /// Pretraining step of the backbone; adaptation keeps the base's value.
    pub pretrain_step: u64,
}

impl Checkpoint {
    pub fn new(model: ModelParams, pretrain_step: u64) -> Self {
        Self {
            model,
            adapters: None,
            task_head: None,
            vocab: None,
            pretrain_step,
        }
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.pretrain_step == other.pretrain_step
            && self.vocab == other.vocab
            && self.model.bitwise_eq_all(&other.model)
            && match (&self.adapters, &other.adapters) {
                (Some(a), Some(b)) => a.bitwise_eq_all(b),
                (None, None) => true,
                _ => false,
            }
            && match (&self.task_head, &other.task_head) {
                (Some(a), Some(b)) => {
                    a.reduction() == b.reduction()
                        && a.tensors().iter().zip(b.tensors()).all(|((na, x), (nb, y))| na == nb && x.bitwise_eq(y))
                }
                (None, None) => true,
                _ => false,
            }
    }

    fn all_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.model
            .tensors()
            .iter()
            .chain(self.adapters.iter().flat_map(|a| a.tensors().iter()))
            .chain(self.task_head.iter().flat_map(|h| h.tensors().iter()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterEntry {
    config: AdapterConfig,
    language: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    reduction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    pretrain_step: u64,
    model: ModelConfig,
    adapters: Option<AdapterEntry>,
    task_head: Option<TaskEntry>,
    has_vocab: bool,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in ckpt.all_tensors() {
        let bytes = t.to_le_bytes();
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            nbytes: bytes.len() as u64,
            crc32: checksum(t),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        pretrain_step: ckpt.pretrain_step,
        model: ckpt.model.config().clone(),
        adapters: ckpt.adapters.as_ref().map(|a| AdapterEntry {
            config: *a.config(),
            language: a.language().to_string(),
        }),
        task_head: ckpt.task_head.as_ref().map(|h| TaskEntry { reduction: h.reduction() }),
        has_vocab: ckpt.vocab.is_some(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_dir_atomic(dir, |tmp| {
        let put = |name: &str, bytes: &[u8]| fs::write(tmp.join(name), bytes).map_err(|e| Error::io(tmp.join(name), e));
        put(WEIGHTS, &blob)?;
        if let Some(v) = &ckpt.vocab {
            put(VOCAB, v.to_text().as_bytes())?;
        }
        put(MANIFEST, format!("{json}\n").as_bytes())
    })
}

fn take_group(
    specs: &[TensorSpec],
    entries: &mut std::slice::Iter<'_, TensorEntry>,
    blob: &[u8],
) -> Result<NamedTensors> {
    let mut out = NamedTensors::new();
    for spec in specs {
        let e = entries
            .next()
            .ok_or_else(|| Error::format(&spec.name, "tensor missing from manifest"))?;
        if e.name != spec.name {
            return Err(Error::format(&e.name, format!("unknown or out-of-order tensor (expected {})", spec.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::format(&e.name, format!("unsupported dtype {}", e.dtype)));
        }
        if e.shape != spec.shape {
            return Err(Error::format(&e.name, format!("shape {:?} does not match config shape {:?}", e.shape, spec.shape)));
        }
        let want = spec.numel() as u64 * 4;
        if e.nbytes != want {
            return Err(Error::format(&e.name, format!("{} bytes recorded, shape needs {want}", e.nbytes)));
        }
        let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= blob.len() as u64);
        let Some(end) = end else {
            return Err(Error::format(&e.name, "extends past the end of weights.bin (truncated blob?)"));
        };
        let bytes = &blob[e.offset as usize..end as usize];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(spec.shape.clone(), data)?;
        if checksum(&t) != e.crc32 {
            return Err(Error::format(&e.name, "checksum mismatch (corrupted data)"));
        }
        out.insert(e.name.clone(), t);
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));
    let text = String::from_utf8(read(MANIFEST)?).map_err(|_| Error::format(MANIFEST, "not UTF-8"))?;
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    match probe.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT) => {}
        Some(other) => return Err(Error::format(MANIFEST, format!("unsupported format {other:?}, expected {FORMAT:?}"))),
        None => return Err(Error::format(MANIFEST, "missing format tag")),
    }
    let m: Manifest = serde_json::from_value(probe).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    m.model.validate().map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    let blob = read(WEIGHTS)?;

    // offsets must tile the blob exactly, in manifest order
    let mut expect = 0u64;
    for e in &m.tensors {
        if e.offset != expect {
            return Err(Error::format(&e.name, format!("offset {} but previous tensor ends at {expect}", e.offset)));
        }
        expect += e.nbytes;
    }

    let mut entries = m.tensors.iter();
    let model = ModelParams::from_tensors(m.model.clone(), take_group(&m.model.tensor_specs(), &mut entries, &blob)?)?;
    let adapters = match &m.adapters {
        Some(a) => {
            let specs = a.config.tensor_specs(m.model.n_layers, m.model.d_model);
            let t = take_group(&specs, &mut entries, &blob)?;
            Some(AdapterBank::from_tensors(&m.model, a.config, a.language.clone(), t)?)
        }
        None => None,
    };
    let task_head = match &m.task_head {
        Some(h) => {
            let specs = TaskHead::specs(m.model.n_layers, m.model.d_model, h.reduction);
            let t = take_group(&specs, &mut entries, &blob)?;
            Some(TaskHead::from_tensors(m.model.n_layers, m.model.d_model, h.reduction, t)?)
        }
        None => None,
    };
    if let Some(extra) = entries.next() {
        return Err(Error::format(&extra.name, "unknown tensor name"));
    }
    if expect != blob.len() as u64 {
        return Err(Error::format(WEIGHTS, format!("{} bytes on disk, manifest accounts for {expect}", blob.len())));
    }
    let vocab = if m.has_vocab {
        let text = String::from_utf8(read(VOCAB)?).map_err(|_| Error::format(VOCAB, "not UTF-8"))?;
        let v = BpeVocab::from_text(&text)?;
        if v.vocab_size() != m.model.vocab_size {
            return Err(Error::format(VOCAB, format!("{} tokens but wte has {} rows", v.vocab_size(), m.model.vocab_size)));
        }
        Some(v)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        adapters,
        task_head,
        vocab,
        pretrain_step: m.pretrain_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::inject_adapters;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { vocab_size: 256, ..ModelConfig::desk() };
        let model = ModelParams::build(&cfg).unwrap();
        let mut slot = None;
        inject_adapters(&model, &mut slot, AdapterConfig::with_reduction(16), "b", 4).unwrap();
        Checkpoint {
            task_head: Some(TaskHead::new(&cfg, 16, 1).unwrap()),
            adapters: slot,
            vocab: Some(BpeVocab::bytes_only()),
            pretrain_step: 500,
            model,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.bitwise_eq(&c));
        assert_eq!(back.pretrain_step, 500);
        // overwrite in place
        save_checkpoint(&Checkpoint::new(c.model.clone(), 7), &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().pretrain_step, 7);
    }

    #[test]
    fn corrupted_byte_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(&c, dir.path()).unwrap();
        let wpath = dir.path().join(WEIGHTS);
        let mut blob = fs::read(&wpath).unwrap();
        let at = 256 * 64 * 4 + 17; // inside wpe
        blob[at] ^= 0x01;
        fs::write(&wpath, &blob).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Format { name, .. }) => assert_eq!(name, "wpe"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_unknown() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&Checkpoint::new(sample().model, 1), dir.path()).unwrap();
        let wpath = dir.path().join(WEIGHTS);
        let blob = fs::read(&wpath).unwrap();
        fs::write(&wpath, &blob[..blob.len() - 8]).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Format { name, .. }) => assert_eq!(name, "ln_f.bias"),
            other => panic!("{other:?}"),
        }
        fs::write(&wpath, &blob).unwrap();

        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"layer1.ln2.bias\"", "\"layer1.mystery\"")).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Format { name, .. }) => assert_eq!(name, "layer1.mystery"),
            other => panic!("{other:?}"),
        }
        fs::write(&mpath, text.replace(FORMAT, "langadapt-checkpoint-v0")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
