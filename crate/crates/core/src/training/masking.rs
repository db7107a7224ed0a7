use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::EncodedSequence;

/// Picks whole words in random order until at least `rate` of the
/// non-special tokens are covered.
pub fn select_whole_word_mask<R: Rng + ?Sized>(seq: &EncodedSequence, rate: f64, rng: &mut R) -> BTreeSet<usize> {
    let target = rate * seq.non_special_len() as f64;
    let mut groups = seq.word_groups.clone();
    groups.shuffle(rng);
    let mut picked = BTreeSet::new();
    for (start, end) in groups {
        if picked.len() as f64 >= target {
            break;
        }
        picked.extend(start..end);
    }
    picked
}

/// How selected positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask_token_prob: 1.0,
            random_token_prob: 0.0,
        }
    }
}

/// Replaces every selected position by `mask_id`; returns the corrupted ids
/// and the original tokens at `positions` (in ascending position order).
pub fn apply_mask(ids: &[u32], positions: &BTreeSet<usize>, mask_id: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    check_positions(ids, positions)?;
    let mut out = ids.to_vec();
    let targets = positions.iter().map(|&p| std::mem::replace(&mut out[p], mask_id)).collect();
    Ok((out, targets))
}

fn check_positions(ids: &[u32], positions: &BTreeSet<usize>) -> Result<()> {
    match positions.iter().next_back() {
        Some(&p) if p >= ids.len() => Err(Error::invalid(format!(
            "mask position {p} outside sequence of {}",
            ids.len()
        ))),
        _ => Ok(()),
    }
}

/// Like [`apply_mask`] but with a mask/random/keep split. Random replacements
/// are drawn from `random_pool`.
pub fn apply_mask_with<R: Rng + ?Sized>(
    ids: &[u32],
    positions: &BTreeSet<usize>,
    mask_id: u32,
    policy: MaskPolicy,
    random_pool: &[u32],
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<u32>)> {
    check_positions(ids, positions)?;
    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(positions.len());
    for &p in positions {
        targets.push(ids[p]);
        let u: f64 = rng.random();
        if u < policy.mask_token_prob {
            out[p] = mask_id;
        } else if u < policy.mask_token_prob + policy.random_token_prob && !random_pool.is_empty() {
            out[p] = random_pool[rng.random_range(0..random_pool.len())];
        }
    }
    Ok((out, targets))
}
