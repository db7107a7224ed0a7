use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Cosine similarity. For unit vectors this is the dot product.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::invalid("cosine of a zero or non-finite vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based
    ((rank + 1) as f64).log2()
}

/// Graded nDCG over the first `k` entries of `ranked`. Zero when the query
/// has no relevant document.
pub fn ndcg_at_k(ranked: &[String], qrels: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(qrels.get(d).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    let mut grades: Vec<u32> = qrels.values().copied().filter(|&r| r > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades.iter().take(k).enumerate().map(|(i, &r)| gain(r) / discount(i + 1)).sum();
    if ideal > 0.0 {
        dcg / ideal
    } else {
        0.0
    }
}

/// Share of relevant documents found in the first `k`; `None` when the query
/// has no relevant document.
pub fn recall_at_k(ranked: &[String], qrels: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let relevant = qrels.values().filter(|&&r| r > 0).count();
    if relevant == 0 {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|d| qrels.get(*d).is_some_and(|&r| r > 0)).count();
    Some(hits as f64 / relevant as f64)
}
