use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::encoder::EncoderModel;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex, write_atomic, write_dir_atomic, write_json};
use crate::numerics::checkpoint::{encode_tensors, load_tensors, save_tensors, FORMAT_VERSION};
use crate::tokenizer::{TokenizerModel, Vocabulary};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Sidecar written next to the tensor manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Frequency rank of each token id, frozen at pretraining time.
    pub token_rank: Vec<u32>,
    pub vocab_sha256: String,
    pub lowercase: bool,
    #[serde(default)]
    pub stage: Option<String>,
}

impl EncoderModel {
    fn ordered_tensors(&self) -> impl Iterator<Item = (&str, &crate::numerics::Tensor)> {
        self.params().iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Content hash of configuration, cluster order and weights.
    pub fn fingerprint(&self) -> String {
        let (manifest, blob) = encode_tensors(self.ordered_tensors(), self.config().precision);
        let mut bytes = serde_json::to_vec(&(self.config(), &self.mlm_head().rank_of, &manifest)).expect("serializable");
        bytes.extend_from_slice(&blob);
        sha256_hex(&bytes)
    }

    /// Writes a complete checkpoint directory; an existing one is replaced atomically.
    pub fn save(&self, dir: &Path, tokenizer: &TokenizerModel, stage: Option<&str>) -> Result<()> {
        if tokenizer.vocab.len() != self.config().vocab_size {
            return Err(Error::Checkpoint(format!(
                "tokenizer has {} tokens but the model expects {}",
                tokenizer.vocab.len(),
                self.config().vocab_size
            )));
        }
        let vocab_text = tokenizer.vocab.to_file_string();
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: self.config().clone(),
            token_rank: self.mlm_head().rank_of.clone(),
            vocab_sha256: sha256_hex(vocab_text.as_bytes()),
            lowercase: tokenizer.lowercase,
            stage: stage.map(str::to_string),
        };
        write_dir_atomic(dir, |tmp| {
            save_tensors(tmp, self.ordered_tensors(), self.config().precision)?;
            write_atomic(&tmp.join(VOCAB_FILE), vocab_text.as_bytes())?;
            write_json(&tmp.join(CONFIG_FILE), &meta)
        })
    }

    pub fn load(dir: &Path) -> Result<(EncoderModel, TokenizerModel)> {
        let meta: CheckpointMeta = read_json(&dir.join(CONFIG_FILE))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab_text = crate::io::read_to_string(&vocab_path)?;
        if sha256_hex(vocab_text.as_bytes()) != meta.vocab_sha256 {
            return Err(Error::Checkpoint(format!(
                "{} does not match the vocabulary the model was trained with",
                vocab_path.display()
            )));
        }
        let mut tokenizer = TokenizerModel::new(Vocabulary::load(&vocab_path)?)?;
        tokenizer.lowercase = meta.lowercase;
        let params: ParamStore = load_tensors(dir)?.into_iter().collect();
        let model = EncoderModel::from_parts(meta.model, params, meta.token_rank)?;
        Ok((model, tokenizer))
    }
}

/// Reads only the sidecar.
pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    read_json(&dir.join(CONFIG_FILE))
}
