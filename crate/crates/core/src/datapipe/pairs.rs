use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cosine, embed_cached, embed_texts, EmbeddingCache};
use crate::model::Embedder;

fn default_source() -> String {
    "default".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub query: String,
    pub positive: String,
    #[serde(default = "default_source")]
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardNegativeRecord {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
    #[serde(default = "default_source")]
    pub source_id: String,
}

/// A mined record; `short` is set when fewer than the requested number of
/// negatives fell inside the similarity band.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedRecord {
    pub record: HardNegativeRecord,
    pub short: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMode {
    /// Keep pairs with similarity at least this value.
    Threshold(f64),
    /// Remove the ⌊f·N⌋ least similar pairs.
    DropFraction(f64),
}

/// Number of pairs removed by `DropFraction(f)` on `n` pairs.
pub fn drop_count(f: f64, n: usize) -> usize {
    // the small slack keeps products like 0.29 * 100 from flooring to 28
    ((f * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Scores every pair by query/positive cosine and filters by `mode`.
/// Survivors keep their input order and carry their similarity.
pub fn filter_pairs_by_similarity(
    pairs: &[SentencePair],
    embedder: &dyn Embedder,
    mode: FilterMode,
) -> Result<Vec<SentencePair>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to filter"));
    }
    match mode {
        FilterMode::Threshold(t) if t.is_nan() => return Err(Error::invalid("threshold is NaN")),
        FilterMode::DropFraction(f) if !(0.0..=1.0).contains(&f) => {
            return Err(Error::invalid(format!("drop fraction {f} outside [0, 1]")))
        }
        _ => {}
    }
    let sims: Vec<f64> = pairs
        .par_iter()
        .map(|p| cosine(&embedder.embed(&p.query)?, &embedder.embed(&p.positive)?))
        .collect::<Result<_>>()?;
    let keep: Vec<bool> = match mode {
        FilterMode::Threshold(t) => sims.iter().map(|&s| s >= t).collect(),
        FilterMode::DropFraction(f) => {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            let mut keep = vec![true; pairs.len()];
            for &i in &order[..drop_count(f, pairs.len())] {
                keep[i] = false;
            }
            keep
        }
    };
    Ok(pairs
        .iter()
        .zip(sims)
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((p, s), _)| SentencePair {
            similarity: Some(s),
            ..p.clone()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MineOptions {
    pub per_query: usize,
    /// Inclusive similarity band for candidates.
    pub band: (f64, f64),
    /// Mine only a seeded random sample of this many pairs.
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for MineOptions {
    fn default() -> Self {
        Self {
            per_query: 4,
            band: (0.3, 0.9),
            limit: None,
            seed: 0,
        }
    }
}

/// Indices of a seeded sample of `limit` items out of `n`, ascending.
pub fn sample_indices(n: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(l) if l < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, n, l).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// For each pair, the `per_query` corpus texts most similar to the query
/// whose similarity lies in the band, excluding the pair's positive.
pub fn mine_hard_negatives(
    pairs: &[SentencePair],
    corpus: &[String],
    embedder: &dyn Embedder,
    opts: MineOptions,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<MinedRecord>> {
    let (lo, hi) = opts.band;
    if !(lo <= hi) {
        return Err(Error::invalid(format!("similarity band [{lo}, {hi}] is empty")));
    }
    if opts.per_query == 0 {
        return Err(Error::invalid("per_query must be at least 1"));
    }
    let mut texts: Vec<&str> = Vec::with_capacity(corpus.len());
    let mut seen = std::collections::HashSet::new();
    for t in corpus {
        if seen.insert(t.trim()) {
            texts.push(t.as_str());
        }
    }
    let docs = embed_cached(embedder, &texts, cache)?;
    let chosen: Vec<&SentencePair> = sample_indices(pairs.len(), opts.limit, opts.seed)
        .into_iter()
        .map(|i| &pairs[i])
        .collect();
    let queries: Vec<&str> = chosen.iter().map(|p| p.query.as_str()).collect();
    let q_emb = embed_texts(embedder, &queries)?;

    chosen
        .par_iter()
        .zip(q_emb.par_iter())
        .map(|(pair, q)| {
            let positive = pair.positive.trim();
            let mut scored: Vec<(f64, usize)> = Vec::new();
            for (i, d) in docs.iter().enumerate() {
                if texts[i].trim() == positive {
                    continue;
                }
                let s = cosine(q, d)?;
                if lo <= s && s <= hi {
                    scored.push((s, i));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let negatives: Vec<String> = scored
                .iter()
                .take(opts.per_query)
                .map(|&(_, i)| texts[i].to_string())
                .collect();
            Ok(MinedRecord {
                short: negatives.len() < opts.per_query,
                record: HardNegativeRecord {
                    query: pair.query.clone(),
                    positive: pair.positive.clone(),
                    negatives,
                    source_id: pair.source_id.clone(),
                },
            })
        })
        .collect()
}
