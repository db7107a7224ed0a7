use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Indices of one batch, all from the same source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceBatch {
    pub source_id: String,
    pub items: Vec<usize>,
}

/// Draws batches that never mix sources. Each source is consumed without
/// replacement within an epoch; the next source is chosen with probability
/// proportional to its remaining items. An epoch ends when no source can fill
/// another batch, and leftovers are discarded.
#[derive(Debug, Clone)]
pub struct SingleSourceSampler {
    sources: Vec<(String, Vec<usize>)>,
    batch_size: usize,
    pools: Vec<Vec<usize>>,
    filled: bool,
    epoch: usize,
    max_epochs: Option<usize>,
}

impl SingleSourceSampler {
    /// `source_of[i]` names the source of item `i`.
    pub fn new(source_of: &[&str], batch_size: usize, max_epochs: Option<usize>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut grouped: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in source_of.iter().enumerate() {
            grouped.entry(s).or_default().push(i);
        }
        if grouped.is_empty() {
            return Err(Error::invalid("no training items"));
        }
        if let Some((s, items)) = grouped.iter().find(|(_, v)| v.len() < batch_size) {
            return Err(Error::invalid(format!(
                "source `{s}` has {} items, fewer than the batch size {batch_size}",
                items.len()
            )));
        }
        let sources: Vec<(String, Vec<usize>)> = grouped.into_iter().map(|(s, v)| (s.to_string(), v)).collect();
        Ok(Self {
            pools: vec![Vec::new(); sources.len()],
            sources,
            batch_size,
            filled: false,
            epoch: 0,
            max_epochs,
        })
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn refill<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (pool, (_, items)) in self.pools.iter_mut().zip(&self.sources) {
            *pool = items.clone();
            pool.shuffle(rng);
        }
    }

    /// Next batch, or `None` once `max_epochs` passes are used up.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<SourceBatch> {
        if !self.pools.iter().any(|p| p.len() >= self.batch_size) {
            if self.filled {
                self.epoch += 1;
            }
            if self.max_epochs.is_some_and(|m| self.epoch >= m) {
                return None;
            }
            self.refill(rng);
            self.filled = true;
        }
        let weights: Vec<usize> = self
            .pools
            .iter()
            .map(|p| if p.len() >= self.batch_size { p.len() } else { 0 })
            .collect();
        let total: usize = weights.iter().sum();
        let mut pick = rng.random_range(0..total);
        let chosen = weights
            .iter()
            .position(|&w| {
                if pick < w {
                    true
                } else {
                    pick -= w;
                    false
                }
            })
            .expect("total weight is positive");
        let pool = &mut self.pools[chosen];
        let items = pool.split_off(pool.len() - self.batch_size);
        Some(SourceBatch {
            source_id: self.sources[chosen].0.clone(),
            items,
        })
    }
}
