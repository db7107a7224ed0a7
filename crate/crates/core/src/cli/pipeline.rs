use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ChunkRecord;
use crate::datapipe::{mine_hard_negatives, pack_chunks, MineOptions, SentencePair, DEFAULT_CHUNK_LEN, DEFAULT_MIN_TAIL};
use crate::error::{Error, Result};
use crate::eval::{compare_models, EmbeddingCache, EvalModel, EvalReport, RetrievalDataset};
use crate::io::{read_jsonl, write_atomic, write_json, write_jsonl};
use crate::model::{EncoderModel, TextEncoder};
use crate::tokenizer::{train_wordpiece_with, TokenizerModel, TrainerConfig};
use crate::training::{build_model, train_to_dir, ArchConfig, PairExample, Stage, StageConfig, StageData};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePaths {
    /// JSON-lines {"id","text"} documents for the tokenizer and MLM.
    pub corpus: PathBuf,
    /// Training pairs for the contrastive stages.
    #[serde(default)]
    pub pairs: Option<PathBuf>,
    /// Use this vocabulary instead of training one.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// Retrieval datasets evaluated after training.
    #[serde(default)]
    pub eval_datasets: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub size: usize,
    pub min_freq: u64,
    pub lowercase: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            size: 2000,
            min_freq: 2,
            lowercase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackSettings {
    pub chunk_len: usize,
    pub min_tail: usize,
}

impl Default for PackSettings {
    fn default() -> Self {
        Self {
            chunk_len: DEFAULT_CHUNK_LEN,
            min_tail: DEFAULT_MIN_TAIL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineSettings {
    pub per_query: usize,
    pub band: [f64; 2],
    pub limit: Option<usize>,
}

impl Default for MineSettings {
    fn default() -> Self {
        let d = MineOptions::default();
        Self {
            per_query: d.per_query,
            band: [d.band.0, d.band.1],
            limit: None,
        }
    }
}

fn default_k() -> usize {
    10
}

/// Declarative description of a whole run. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Replaces the seed of every stage and of negative sampling.
    pub seed: u64,
    pub paths: PipelinePaths,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    #[serde(default)]
    pub pack: PackSettings,
    /// Architecture of the model built by the first stage.
    #[serde(default)]
    pub model: ArchConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub mine: MineSettings,
    #[serde(default = "default_k")]
    pub k: usize,
}

impl RunConfig {
    /// Checks the config and resolves its paths against `base`.
    pub fn resolved(&self, base: &Path) -> Result<RunConfig> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "run config version {} is not supported (expected {RUN_CONFIG_VERSION})",
                self.version
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("no stages configured".into()));
        }
        let fix = |p: &PathBuf| -> Result<PathBuf> {
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            if !full.exists() {
                return Err(Error::Config(format!("path {} does not exist", full.display())));
            }
            Ok(full)
        };
        let mut out = self.clone();
        out.paths.corpus = fix(&self.paths.corpus)?;
        out.paths.pairs = self.paths.pairs.as_ref().map(fix).transpose()?;
        out.paths.vocab = self.paths.vocab.as_ref().map(fix).transpose()?;
        out.paths.eval_datasets = self.paths.eval_datasets.iter().map(fix).collect::<Result<_>>()?;
        for s in &mut out.stages {
            s.seed = self.seed;
            s.arch = self.model.clone();
            s.validate()?;
            if s.stage != Stage::Mlm && out.paths.pairs.is_none() {
                return Err(Error::Config(format!("stage `{}` needs paths.pairs", s.stage.as_str())));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct TextRecord {
    text: String,
}

fn stage_dir(out: &Path, i: usize, stage: Stage) -> PathBuf {
    out.join("stages").join(format!("{:02}-{}", i + 1, stage.as_str()))
}

/// Runs tokenizer training (unless a vocabulary is given), chunk packing,
/// every stage in order and a final evaluation of each stage's checkpoint.
/// Everything is written under `out`.
pub fn run_pipeline(cfg: &RunConfig, base: &Path, out: &Path) -> Result<EvalReport> {
    let cfg = cfg.resolved(base)?;
    let texts: Vec<String> = read_jsonl::<TextRecord>(&cfg.paths.corpus)?.into_iter().map(|r| r.text).collect();

    let vocab = match &cfg.paths.vocab {
        Some(p) => crate::tokenizer::Vocabulary::load(p)?,
        None => {
            let tc = TrainerConfig {
                lowercase: cfg.tokenizer.lowercase,
                ..TrainerConfig::default()
            };
            train_wordpiece_with(&texts, cfg.tokenizer.size, cfg.tokenizer.min_freq, &tc)?
        }
    };
    write_atomic(&out.join("vocab.txt"), vocab.to_file_string().as_bytes())?;
    let mut tokenizer = TokenizerModel::new(vocab)?;
    tokenizer.lowercase = cfg.tokenizer.lowercase;

    let chunks = pack_chunks(&texts, &tokenizer, cfg.pack.chunk_len, cfg.pack.min_tail)?;
    let records: Vec<ChunkRecord> = chunks.iter().map(|c| ChunkRecord { ids: c.clone() }).collect();
    write_jsonl(&out.join("chunks.jsonl"), &records)?;
    log::info!("{} documents packed into {} chunks", texts.len(), chunks.len());

    let pairs: Vec<PairExample> = match &cfg.paths.pairs {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let cache = EmbeddingCache::from_env();
    let mut model: Option<EncoderModel> = None;
    let mut checkpoints = Vec::new();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let mut current = match model.take() {
            Some(m) => m,
            None => build_model(stage, &tokenizer, Some(&chunks))?,
        };
        let mined: Vec<PairExample>;
        let data = match stage.stage {
            Stage::Mlm => StageData::Chunks(&chunks),
            Stage::Contrastive => StageData::Pairs(&pairs),
            Stage::HardNegative => {
                mined = mine_for(&current, &tokenizer, &pairs, &cfg, cache.as_ref())?;
                StageData::Pairs(&mined)
            }
        };
        let dir = stage_dir(out, i, stage.stage);
        let report = train_to_dir(stage, &mut current, &tokenizer, data, &dir, None)?;
        log::info!(
            "stage {} finished after {} steps, loss {:.4}",
            stage.stage.as_str(),
            report.steps,
            report.records.last().map_or(f64::NAN, |r| r.loss)
        );
        checkpoints.push(dir);
        model = Some(current);
    }

    let datasets: Vec<RetrievalDataset> = cfg
        .paths
        .eval_datasets
        .iter()
        .map(|d| RetrievalDataset::load(d))
        .collect::<Result<_>>()?;
    let loaded: Vec<(String, EncoderModel, TokenizerModel)> = checkpoints
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            EncoderModel::load(p).map(|(m, t)| (name, m, t))
        })
        .collect::<Result<_>>()?;
    let encoders: Vec<TextEncoder> = loaded.iter().map(|(_, m, t)| TextEncoder::new(m, t)).collect();
    let models: Vec<EvalModel> = loaded
        .iter()
        .zip(&encoders)
        .map(|((n, _, _), e)| EvalModel::from_encoder(n.clone(), e))
        .collect();
    let report = if datasets.is_empty() {
        EvalReport {
            k: cfg.k,
            models: Vec::new(),
            rows: Vec::new(),
            coverage: Vec::new(),
        }
    } else {
        compare_models(&models, &datasets, cfg.k, cache.as_ref())?
    };
    write_json(&out.join("report.json"), &report)?;
    write_atomic(&out.join("report.txt"), report.render_table().as_bytes())?;
    Ok(report)
}

/// Hard negatives for the pipeline's pairs, drawn from the pairs' own
/// positives; pairs left without negatives are dropped.
fn mine_for(
    model: &EncoderModel,
    tokenizer: &TokenizerModel,
    pairs: &[PairExample],
    cfg: &RunConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<PairExample>> {
    let sentence_pairs: Vec<SentencePair> = pairs
        .iter()
        .map(|p| SentencePair {
            query: p.query.clone(),
            positive: p.positive.clone(),
            source_id: p.source_id.clone(),
            similarity: None,
        })
        .collect();
    let corpus: Vec<String> = pairs.iter().map(|p| p.positive.clone()).collect();
    let opts = MineOptions {
        per_query: cfg.mine.per_query,
        band: (cfg.mine.band[0], cfg.mine.band[1]),
        limit: cfg.mine.limit,
        seed: cfg.seed,
    };
    let enc = TextEncoder::new(model, tokenizer);
    let mined = mine_hard_negatives(&sentence_pairs, &corpus, &enc, opts, cache)?;
    let out: Vec<PairExample> = mined
        .into_iter()
        .filter(|m| !m.record.negatives.is_empty())
        .map(|m| PairExample {
            query: m.record.query,
            positive: m.record.positive,
            negatives: m.record.negatives,
            source_id: m.record.source_id,
        })
        .collect();
    if out.is_empty() {
        return Err(Error::invalid("no pair received a hard negative inside the similarity band"));
    }
    Ok(out)
}
