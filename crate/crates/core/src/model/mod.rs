mod adaptive;
mod alibi;
mod checkpoint;
mod config;
mod embedding;
mod encoder;
mod params;


pub use adaptive::{frequency_ranks, AdaptiveSoftmaxHead};
pub use alibi::{alibi_bias_matrix, alibi_slopes, AlibiBias};
pub use checkpoint::{read_meta, CheckpointMeta, CONFIG_FILE, VOCAB_FILE};
pub use config::{default_cutoffs, ModelConfig};
pub use embedding::MultiProjEmbedding;
pub use encoder::EncoderModel;
pub use params::{Bound, ParamStore};

use crate::error::Result;
use crate::tokenizer::TokenizerModel;

/// Anything that maps text to a fixed-width vector.
pub trait Embedder: Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    /// Stable identity used to key embedding caches; `None` disables caching.
    fn cache_key(&self) -> Option<String> {
        None
    }
}

impl<F> Embedder for F
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync,
{
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self(text)
    }
}

/// A model paired with the tokenizer it was trained with.
pub struct TextEncoder<'a> {
    pub model: &'a EncoderModel,
    pub tokenizer: &'a TokenizerModel,
    pub checkpoint_hash: String,
    pub tokenizer_hash: String,
    key: String,
}

impl<'a> TextEncoder<'a> {
    pub fn new(model: &'a EncoderModel, tokenizer: &'a TokenizerModel) -> Self {
        let checkpoint_hash = model.fingerprint();
        let tokenizer_hash = crate::io::sha256_hex(tokenizer.vocab.to_file_string().as_bytes());
        let key = crate::io::sha256_hex(format!("{checkpoint_hash}:{tokenizer_hash}").as_bytes());
        Self {
            model,
            tokenizer,
            checkpoint_hash,
            tokenizer_hash,
            key,
        }
    }
}

impl Embedder for TextEncoder<'_> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.model.embed_text(self.tokenizer, text)
    }

    fn cache_key(&self) -> Option<String> {
        Some(self.key.clone())
    }
}
