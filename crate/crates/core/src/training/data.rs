use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tokenizer::BpeVocab;

/// Encode a text corpus into one token stream. Lines are encoded
/// independently (each keeps its trailing newline) and concatenated, with no
/// boundary tokens.
pub fn encode_corpus(vocab: &BpeVocab, text: &str) -> Vec<u32> {
    let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let ids = cache.entry(line).or_insert_with(|| vocab.encode_str(line));
        out.extend_from_slice(ids);
    }
    out
}

/// Non-overlapping windows of `seq_len` tokens; a tail of at least two
/// tokens is kept as a shorter final window.
pub fn chunk_stream(stream: &[u32], seq_len: usize) -> Vec<Vec<u32>> {
    stream
        .chunks(seq_len.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[u32]>::to_vec)
        .collect()
}

/// One contiguous window starting at a uniformly drawn offset.
pub fn sample_window<R: Rng + ?Sized>(stream: &[u32], seq_len: usize, rng: &mut R) -> Result<Vec<u32>> {
    if stream.len() < seq_len || seq_len < 2 {
        return Err(Error::Data(format!(
            "token stream of length {} cannot supply windows of {seq_len}",
            stream.len()
        )));
    }
    let start = rng.random_range(0..=stream.len() - seq_len);
    Ok(stream[start..start + seq_len].to_vec())
}

pub fn sample_batch<R: Rng + ?Sized>(stream: &[u32], seq_len: usize, batch: usize, rng: &mut R) -> Result<TokenBatch> {
    let rows = (0..batch)
        .map(|_| sample_window(stream, seq_len, rng))
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::from_rows(&rows)
}
