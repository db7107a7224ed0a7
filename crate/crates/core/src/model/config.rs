use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;

fn default_projections() -> usize {
    4
}
fn default_train_len() -> usize {
    512
}
fn default_infer_len() -> usize {
    8192
}
fn default_reduction() -> usize {
    4
}
fn default_eps() -> f64 {
    1e-12
}
fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_projections")]
    pub num_projections: usize,
    #[serde(default = "default_train_len")]
    pub max_train_len: usize,
    #[serde(default = "default_infer_len")]
    pub max_infer_len: usize,
    /// Ascending frequency-rank boundaries; the last one equals `vocab_size`.
    /// Empty means "derive the default 20/40/40 split".
    #[serde(default)]
    pub adaptive_cutoffs: Vec<usize>,
    #[serde(default = "default_reduction")]
    pub tail_reduction_factor: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub precision: Precision,
    /// Truncate matmul inputs to bfloat16 in the forward pass.
    #[serde(default)]
    pub bf16_matmul: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 128, FFN 512.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn_dim: 512,
            num_projections: default_projections(),
            max_train_len: default_train_len(),
            max_infer_len: default_infer_len(),
            adaptive_cutoffs: default_cutoffs(vocab_size),
            tail_reduction_factor: default_reduction(),
            layer_norm_eps: default_eps(),
            init_std: default_init_std(),
            precision: Precision::F32,
            bf16_matmul: false,
        }
    }

    /// Fills derived defaults and checks every invariant.
    pub fn validated(mut self) -> Result<Self> {
        if self.adaptive_cutoffs.is_empty() {
            self.adaptive_cutoffs = default_cutoffs(self.vocab_size);
        }
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, hidden, heads and ffn_dim must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.num_projections == 0 {
            return fail("num_projections must be at least 1".into());
        }
        if self.max_infer_len < self.max_train_len {
            return fail("max_infer_len must be >= max_train_len".into());
        }
        let c = &self.adaptive_cutoffs;
        if c.first() == Some(&0) || c.windows(2).any(|w| w[0] >= w[1]) || c.last() != Some(&self.vocab_size) {
            return fail(format!(
                "cutoffs {c:?} must be strictly ascending, positive, and end at vocab_size {}",
                self.vocab_size
            ));
        }
        if self.tail_reduction_factor == 0 {
            return fail("tail_reduction_factor must be positive".into());
        }
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Width of tail cluster `i` (1-based) after down-projection.
    pub fn tail_dim(&self, i: usize) -> usize {
        (self.hidden / self.tail_reduction_factor.pow(i as u32)).max(1)
    }

    pub fn tail_count(&self) -> usize {
        self.adaptive_cutoffs.len() - 1
    }
}

/// Head = top 20% most frequent tokens; two tails split the rest 40/40.
pub fn default_cutoffs(vocab_size: usize) -> Vec<usize> {
    if vocab_size < 3 {
        return vec![vocab_size];
    }
    let head = ((vocab_size as f64 * 0.2).round() as usize).max(1);
    let mid = (((vocab_size as f64) * 0.6).round() as usize).clamp(head + 1, vocab_size - 1);
    vec![head, mid, vocab_size]
}
