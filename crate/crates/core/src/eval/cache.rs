use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_json};
use crate::model::Embedder;

/// Environment variable naming the embedding cache directory.
pub const CACHE_ENV: &str = "MEDEIR_CACHE";

/// Embeds every text. Work runs on the rayon pool but the output order (and
/// every value) matches a serial loop.
pub fn embed_texts(embedder: &dyn Embedder, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
    texts.par_iter().map(|t| embedder.embed(t)).collect()
}

/// On-disk store of whole-collection embeddings, one file per
/// (embedder identity, collection contents).
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// The cache named by `MEDEIR_CACHE`, if set and non-empty.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(Self::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry(&self, key: &str, texts: &[&str]) -> PathBuf {
        let mut bytes = Vec::new();
        for t in texts {
            bytes.extend_from_slice(&(t.len() as u64).to_le_bytes());
            bytes.extend_from_slice(t.as_bytes());
        }
        self.dir.join(key).join(format!("{}.json", sha256_hex(&bytes)))
    }

    /// Cached embeddings of `texts`, computing and storing them on a miss.
    /// Embedders without a cache key always compute.
    pub fn embed(&self, embedder: &dyn Embedder, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let Some(key) = embedder.cache_key() else {
            return embed_texts(embedder, texts);
        };
        let path = self.entry(&key, texts);
        if path.exists() {
            match read_json::<Vec<Vec<f64>>>(&path) {
                Ok(v) if v.len() == texts.len() => return Ok(v),
                Ok(_) | Err(Error::Json { .. }) => log::warn!("ignoring damaged cache entry {}", path.display()),
                Err(e) => return Err(e),
            }
        }
        let out = embed_texts(embedder, texts)?;
        write_json(&path, &out)?;
        Ok(out)
    }
}

/// Embeds through `cache` when one is given.
pub fn embed_cached(embedder: &dyn Embedder, texts: &[&str], cache: Option<&EmbeddingCache>) -> Result<Vec<Vec<f64>>> {
    match cache {
        Some(c) => c.embed(embedder, texts),
        None => embed_texts(embedder, texts),
    }
}
