//! WordPiece vocabulary training.
//!
//! Words start as characters (non-initial ones carrying the continuation
//! prefix). Each round merges the adjacent pair with the highest
//! `freq(ab) / (freq(a) * freq(b))`, until the vocabulary reaches the target
//! size or no pair occurs at least `min_frequency` times. Equal scores go to
//! the merged token whose surface form (prefix stripped) sorts first, then to
//! the full token string.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::vocab::{Vocabulary, CONTINUATION_PREFIX, DEFAULT_SPECIALS};
use super::wordpiece::pre_tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub lowercase: bool,
    pub continuation_prefix: String,
    pub special_tokens: Vec<String>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            continuation_prefix: CONTINUATION_PREFIX.to_string(),
            special_tokens: DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Candidate merge with its exact score as a fraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ScoredPair {
    pub left: u32,
    pub right: u32,
    pub pair_freq: u64,
    pub denom: u128,
    pub merged: String,
    pub surface: String,
}

impl ScoredPair {
    /// Total order: better candidates compare as `Less`.
    pub(crate) fn rank(&self, other: &Self) -> Ordering {
        let lhs = self.pair_freq as u128 * other.denom;
        let rhs = other.pair_freq as u128 * self.denom;
        rhs.cmp(&lhs)
            .then_with(|| self.surface.cmp(&other.surface))
            .then_with(|| self.merged.cmp(&other.merged))
    }
}

pub(crate) fn word_counts(corpus: &[String], lowercase: bool) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for doc in corpus {
        for w in pre_tokenize(doc, lowercase) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn train_wordpiece(corpus: &[String], target_size: usize, min_frequency: u64) -> Result<Vocabulary> {
    train_wordpiece_with(corpus, target_size, min_frequency, &TrainerConfig::default())
}

pub fn train_wordpiece_with(
    corpus: &[String],
    target_size: usize,
    min_frequency: u64,
    config: &TrainerConfig,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }
    let prefix = config.continuation_prefix.as_str();
    let counts = word_counts(corpus, config.lowercase);

    let mut alphabet = BTreeSet::new();
    for word in counts.keys() {
        for (i, c) in word.chars().enumerate() {
            alphabet.insert(if i == 0 { c.to_string() } else { format!("{prefix}{c}") });
        }
    }
    let mut tokens: Vec<String> = config.special_tokens.clone();
    tokens.extend(alphabet.into_iter().filter(|t| !config.special_tokens.contains(t)));
    if target_size < tokens.len() {
        return Err(Error::invalid(format!(
            "target size {target_size} is below specials + alphabet ({})",
            tokens.len()
        )));
    }
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    // Token id -> string for merged pieces that already exist in `tokens`.
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .iter()
        .map(|(w, &n)| {
            let ids = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let t = if i == 0 { c.to_string() } else { format!("{prefix}{c}") };
                    index[&t]
                })
                .collect();
            (ids, n)
        })
        .collect();

    while tokens.len() < target_size {
        let Some(best) = best_pair(&words, &tokens, prefix, min_frequency) else {
            break;
        };
        let merged_id = match index.get(&best.merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                tokens.push(best.merged.clone());
                index.insert(best.merged.clone(), id);
                id
            }
        };
        for (ids, _) in &mut words {
            apply_merge(ids, best.left, best.right, merged_id);
        }
    }
    let specials: Vec<&str> = config.special_tokens.iter().map(String::as_str).collect();
    Vocabulary::new(tokens, prefix, &specials)
}

pub(crate) fn best_pair(
    words: &[(Vec<u32>, u64)],
    tokens: &[String],
    prefix: &str,
    min_frequency: u64,
) -> Option<ScoredPair> {
    let mut unit: HashMap<u32, u64> = HashMap::new();
    let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
    for (ids, n) in words {
        for &id in ids {
            *unit.entry(id).or_insert(0) += n;
        }
        for w in ids.windows(2) {
            *pairs.entry((w[0], w[1])).or_insert(0) += n;
        }
    }
    let mut best: Option<ScoredPair> = None;
    for (&(left, right), &pair_freq) in &pairs {
        if pair_freq < min_frequency.max(1) {
            continue;
        }
        let right_surface = tokens[right as usize].strip_prefix(prefix).unwrap_or(&tokens[right as usize]);
        let merged = format!("{}{}", tokens[left as usize], right_surface);
        let surface = merged.strip_prefix(prefix).unwrap_or(&merged).to_string();
        let candidate = ScoredPair {
            left,
            right,
            pair_freq,
            denom: unit[&left] as u128 * unit[&right] as u128,
            merged,
            surface,
        };
        if best.as_ref().is_none_or(|b| candidate.rank(b) == Ordering::Less) {
            best = Some(candidate);
        }
    }
    best
}

fn apply_merge(ids: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}
