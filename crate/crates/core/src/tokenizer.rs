//! Byte-level BPE.
//!
//! Ids `0..256` are raw bytes, merges get ids `256..256+|merges|` in rank
//! order, and special tokens (if any) come last. Training counts every
//! adjacent pair (overlaps included) and picks the highest count, breaking
//! ties by the smallest `(left, right)` id pair. Encoding applies merges in
//! rank order, leftmost-first within a rank.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
const HEADER: &str = "bpe-v1";
/// Name of the padding special, when a vocab carries one.
pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    specials: Vec<String>,
    ranks: HashMap<(u32, u32), u32>,
    expansions: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// GPT-2 style pre-split before each space so pairs never span a word
    /// boundary. Only changes training counts; encoding stays byte-pure.
    pub whitespace_split: bool,
}

impl BpeVocab {
    /// Identity vocab: 256 byte tokens, no merges.
    pub fn bytes_only() -> Self {
        Self::from_parts(Vec::new(), Vec::new()).expect("empty merge list is valid")
    }

    pub fn from_parts(merges: Vec<(u32, u32)>, specials: Vec<String>) -> Result<Self> {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let defined = expansions.len() as u32;
            if l >= defined || r >= defined {
                return Err(Error::format(
                    "bpe vocab",
                    format!("merge {rank} ({l} {r}) references an undefined id"),
                ));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::format("bpe vocab", format!("duplicate merge ({l} {r})")));
            }
            let mut bytes = expansions[l as usize].clone();
            bytes.extend_from_slice(&expansions[r as usize]);
            expansions.push(bytes);
        }
        for (i, s) in specials.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) || specials[..i].contains(s) {
                return Err(Error::format("bpe vocab", format!("invalid special token {s:?}")));
            }
        }
        Ok(Self {
            merges,
            specials,
            ranks,
            expansions,
        })
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_TOKENS + self.merges.len() + self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| (BYTE_TOKENS + self.merges.len() + i) as u32)
    }

    pub fn pad_id(&self) -> Option<u32> {
        self.special_id(PAD)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let first = BYTE_TOKENS + self.merges.len();
        (id as usize) >= first && (id as usize) < self.vocab_size()
    }

    /// Byte expansion of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            // lowest-rank pair present; pairs created by a merge always rank
            // above it, so this matches sequential rank-order application
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let new_id = (BYTE_TOKENS + rank as usize) as u32;
            ids = merge_pair(&ids, l, r, new_id);
        }
        ids
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    /// Concatenated byte expansion. Special ids are rejected.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        self.decode_impl(ids, false)
    }

    /// Like [`decode`](Self::decode) but renders specials as their names.
    pub fn decode_with_specials(&self, ids: &[u32]) -> Result<Vec<u8>> {
        self.decode_impl(ids, true)
    }

    fn decode_impl(&self, ids: &[u32], specials: bool) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(bytes) = self.expansions.get(id as usize) {
                out.extend_from_slice(bytes);
            } else if self.is_special(id) {
                if !specials {
                    return Err(Error::Contract(format!("special id {id} in decode input")));
                }
                let name = &self.specials[id as usize - self.expansions.len()];
                out.extend_from_slice(name.as_bytes());
            } else {
                return Err(Error::Contract(format!(
                    "token id {id} out of range for vocab size {}",
                    self.vocab_size()
                )));
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {} {}\n", self.vocab_size(), self.specials.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        if !self.specials.is_empty() {
            s.push_str("#specials\n");
            for name in &self.specials {
                s.push_str(name);
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |msg: String| Error::format("bpe vocab", msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != HEADER {
            return Err(err(format!("bad header {header:?}")));
        }
        let size: usize = fields[1].parse().map_err(|_| err(format!("bad vocab size {:?}", fields[1])))?;
        let n_specials: usize = fields[2].parse().map_err(|_| err(format!("bad special count {:?}", fields[2])))?;
        let mut merges = Vec::new();
        let mut specials = Vec::new();
        let mut in_specials = false;
        for (lineno, line) in lines.enumerate() {
            if line == "#specials" {
                if in_specials {
                    return Err(err("repeated #specials section".into()));
                }
                in_specials = true;
                continue;
            }
            if in_specials {
                specials.push(line.to_string());
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(format!("line {}: expected `<left> <right>`", lineno + 2)));
            };
            let parse = |v: &str| v.parse::<u32>().map_err(|_| err(format!("line {}: bad id {v:?}", lineno + 2)));
            merges.push((parse(l)?, parse(r)?));
        }
        if specials.len() != n_specials {
            return Err(err(format!("header declares {n_specials} specials, found {}", specials.len())));
        }
        let vocab = Self::from_parts(merges, specials)?;
        if vocab.vocab_size() != size {
            return Err(err(format!("header declares vocab size {size}, file defines {}", vocab.vocab_size())));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
            other => other,
        })
    }
}

fn merge_pair(ids: &[u32], l: u32, r: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Train a fresh vocab on `corpus`. Runs `target_vocab − 256 − |specials|`
/// merges, stopping early once no pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, target_vocab: usize, specials: &[String], opts: TrainOptions) -> Result<BpeVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    if target_vocab < BYTE_TOKENS + specials.len() {
        return Err(Error::Config(format!(
            "target vocab {target_vocab} is below 256 byte tokens + {} specials",
            specials.len()
        )));
    }
    // identical pieces are counted once with a multiplicity
    let mut pieces: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut any = false;
    for doc in corpus {
        any = true;
        let doc = doc.as_ref();
        if opts.whitespace_split {
            for piece in split_before_spaces(doc) {
                *pieces.entry(piece.iter().map(|&b| b as u32).collect()).or_default() += 1;
            }
        } else if !doc.is_empty() {
            *pieces.entry(doc.iter().map(|&b| b as u32).collect()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Data("tokenizer corpus is empty".into()));
    }
    let mut pieces: Vec<(Vec<u32>, u64)> = pieces.into_iter().filter(|(p, _)| p.len() >= 2).collect();
    let budget = target_vocab - BYTE_TOKENS - specials.len();
    let mut merges = Vec::with_capacity(budget);
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for step in 0..budget {
        counts.clear();
        for (seq, mult) in &pieces {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += mult;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((&pair, _)) = best else { break };
        let new_id = (BYTE_TOKENS + step) as u32;
        for (seq, _) in pieces.iter_mut() {
            if seq.windows(2).any(|w| (w[0], w[1]) == pair) {
                *seq = merge_pair(seq, pair.0, pair.1, new_id);
            }
        }
        pieces.retain(|(p, _)| p.len() >= 2);
        merges.push(pair);
    }
    BpeVocab::from_parts(merges, specials.to_vec())
}

fn split_before_spaces(doc: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < doc.len() {
            i += 1;
            if i == doc.len() || (doc[i] == b' ' && i > start) {
                let piece = &doc[start..i];
                start = i;
                return Some(piece);
            }
        }
        None
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_counts(seqs: &[Vec<u32>]) -> HashMap<(u32, u32), u64> {
        let mut c = HashMap::new();
        for s in seqs {
            for w in s.windows(2) {
                *c.entry((w[0], w[1])).or_default() += 1;
            }
        }
        c
    }

    #[test]
    fn aaab_first_merge_is_aa() {
        let corpus = ["aaab", "aaab"];
        // brute-force oracle on the raw bytes
        let seqs: Vec<Vec<u32>> = corpus.iter().map(|s| s.bytes().map(u32::from).collect()).collect();
        let counts = pair_counts(&seqs);
        assert_eq!(counts[&(97, 97)], 4);
        assert_eq!(counts[&(97, 98)], 2);
        let v = train_bpe(corpus, 258, &[], TrainOptions::default()).unwrap();
        assert_eq!(v.merges(), &[(97, 97), (97, 98)]);
        let v = train_bpe(corpus, 257, &[], TrainOptions::default()).unwrap();
        assert_eq!(v.merges(), &[(97, 97)]);
    }

    #[test]
    fn aaab_second_merge_tie_break() {
        let corpus = ["aaab", "aaab"];
        let after: Vec<Vec<u32>> = vec![vec![256, 97, 98]; 2];
        let counts = pair_counts(&after);
        assert_eq!(counts[&(256, 97)], 2);
        assert_eq!(counts[&(97, 98)], 2);
        let v = train_bpe(corpus, 259, &[], TrainOptions::default()).unwrap();
        assert_eq!(v.merges()[1], (97, 98));
        assert_eq!(v.token_bytes(257).unwrap(), b"ab");
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_bpe(["abcd"], 300, &[], TrainOptions::default()).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn target_256_is_identity() {
        let v = train_bpe(["hello hello"], 256, &[], TrainOptions::default()).unwrap();
        assert_eq!(v.vocab_size(), 256);
        assert_eq!(v.encode(b"hi"), vec![104, 105]);
    }

    #[test]
    fn target_below_specials_is_config_error() {
        let r = train_bpe(["x"], 256, &[PAD.to_string()], TrainOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn empty_corpus_is_data_error() {
        let r = train_bpe(Vec::<&str>::new(), 300, &[], TrainOptions::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn leftmost_first_encoding() {
        let v = BpeVocab::from_parts(vec![(97, 97)], vec![]).unwrap();
        assert_eq!(v.encode(b"aaa"), vec![256, 97]);
        assert_eq!(v.encode(b""), Vec::<u32>::new());
    }

    #[test]
    fn decode_basics() {
        let v = BpeVocab::bytes_only();
        assert_eq!(v.decode(&[]).unwrap(), b"");
        assert_eq!(v.decode(&[97, 98]).unwrap(), b"ab");
        assert!(matches!(v.decode(&[256]), Err(Error::Contract(_))));
    }

    #[test]
    fn specials_come_last_and_are_opt_in() {
        let v = train_bpe(["aaab", "aaab"], 259, &[PAD.to_string()], TrainOptions::default()).unwrap();
        assert_eq!(v.merges().len(), 2);
        assert_eq!(v.vocab_size(), 259);
        let pad = v.pad_id().unwrap();
        assert_eq!(pad, 258);
        assert!(v.decode(&[97, pad]).is_err());
        assert_eq!(v.decode_with_specials(&[97, pad]).unwrap(), b"a<pad>");
    }

    #[test]
    fn whitespace_split_keeps_pairs_inside_words() {
        let corpus = ["ab ab ab"];
        let v = train_bpe(corpus, 400, &[], TrainOptions { whitespace_split: true }).unwrap();
        for i in 0..v.merges().len() {
            let bytes = v.token_bytes((256 + i) as u32).unwrap();
            assert!(!bytes[1..].contains(&b' '), "merge spans a word boundary: {bytes:?}");
        }
    }

    #[test]
    fn text_format_roundtrip_and_layout() {
        let v = train_bpe(["aaab", "aaab"], 259, &[PAD.to_string()], TrainOptions::default()).unwrap();
        let text = v.to_text();
        assert_eq!(text, "bpe-v1 259 1\n97 97\n97 98\n#specials\n<pad>\n");
        assert_eq!(BpeVocab::from_text(&text).unwrap(), v);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(BpeVocab::from_text("bpe-v2 256 0\n").is_err());
        assert!(BpeVocab::from_text("bpe-v1 257 0\n").is_err());
        assert!(BpeVocab::from_text("bpe-v1 257 0\n300 1\n").is_err());
        assert!(BpeVocab::from_text("bpe-v1 257 1\n97 97\n").is_err());
        assert!(BpeVocab::from_text("bpe-v1 257 0\n97 x\n").is_err());
    }

    #[test]
    fn retraining_ignores_previous_corpus() {
        let b = ["zzzy zzzy", "zyzy"];
        let fresh = train_bpe(b, 270, &[], TrainOptions::default()).unwrap();
        let _a = train_bpe(["aaab", "aaab"], 270, &[], TrainOptions::default()).unwrap();
        let again = train_bpe(b, 270, &[], TrainOptions::default()).unwrap();
        assert_eq!(fresh, again);
    }
}
