use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenizerModel, SEP};

pub const DEFAULT_CHUNK_LEN: usize = 512;
pub const DEFAULT_MIN_TAIL: usize = 16;

/// Concatenates the token ids of consecutive documents, with `[SEP]` between
/// documents, and cuts the stream into `chunk_len`-token chunks. A final
/// shorter piece is kept only when it has at least `min_tail` tokens.
pub fn pack_chunks<S: AsRef<str> + Sync>(
    docs: &[S],
    tokenizer: &TokenizerModel,
    chunk_len: usize,
    min_tail: usize,
) -> Result<Vec<Vec<u32>>> {
    let encoded: Vec<Vec<u32>> = docs.par_iter().map(|d| tokenizer.encode(d.as_ref()).ids).collect();
    pack_ids(&encoded, tokenizer.vocab.special_id(SEP)?, chunk_len, min_tail)
}

/// [`pack_chunks`] on documents that are already token ids.
pub fn pack_ids(docs: &[Vec<u32>], sep: u32, chunk_len: usize, min_tail: usize) -> Result<Vec<Vec<u32>>> {
    if chunk_len == 0 || chunk_len < min_tail {
        return Err(Error::invalid(format!(
            "chunk_len {chunk_len} must be positive and at least min_tail {min_tail}"
        )));
    }
    let mut stream: Vec<u32> = Vec::new();
    for d in docs.iter().filter(|d| !d.is_empty()) {
        if !stream.is_empty() {
            stream.push(sep);
        }
        stream.extend_from_slice(d);
    }
    Ok(stream
        .chunks(chunk_len)
        .filter(|c| c.len() == chunk_len || (!c.is_empty() && c.len() >= min_tail))
        .map(<[u32]>::to_vec)
        .collect())
}
