use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Stage, StageConfig};
use super::losses::{hard_negative_loss, ContrastiveOptions};
use super::masking::{apply_mask_with, select_whole_word_mask, MaskPolicy};
use super::optim::{accumulate, adamw_step, lr_at, OptimizerState};
use super::sampler::SingleSourceSampler;
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::model::{EncoderModel, ModelConfig};
use crate::numerics::{Tensor, Var};
use crate::tokenizer::{EncodedSequence, TokenizerModel, MASK};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Sequences per parallel work unit; results are always reduced in order.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: u64,
}

fn default_source() -> String {
    "default".to_string()
}

/// One training pair, optionally with mined hard negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
    #[serde(default = "default_source")]
    pub source_id: String,
}

#[derive(Debug, Clone, Copy)]
pub enum StageData<'a> {
    /// Packed token-id chunks for MLM.
    Chunks(&'a [Vec<u32>]),
    Pairs(&'a [PairExample]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub records: Vec<LossRecord>,
    pub steps: usize,
    /// True when the data ran out in the middle of a global batch.
    pub dropped_partial_batch: bool,
}

/// Token counts over the MLM chunks, used to order adaptive-softmax clusters.
pub fn token_counts(chunks: &[Vec<u32>], vocab_size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; vocab_size];
    for &id in chunks.iter().flatten() {
        if let Some(c) = counts.get_mut(id as usize) {
            *c += 1;
        }
    }
    counts
}

/// A freshly initialised model sized by `cfg.arch` for `tokenizer`.
pub fn build_model(cfg: &StageConfig, tokenizer: &TokenizerModel, chunks: Option<&[Vec<u32>]>) -> Result<EncoderModel> {
    let v = tokenizer.vocab.len();
    let a = &cfg.arch;
    let mc = ModelConfig {
        hidden: a.hidden,
        layers: a.layers,
        heads: a.heads,
        ffn_dim: a.ffn_dim,
        num_projections: a.num_projections,
        precision: a.precision,
        ..ModelConfig::desk(v)
    };
    let counts = chunks.map(|c| token_counts(c, v));
    EncoderModel::new(mc, counts.as_deref(), cfg.seed)
}

fn check_common(cfg: &StageConfig, model: &EncoderModel, tokenizer: &TokenizerModel) -> Result<()> {
    cfg.validate()?;
    if tokenizer.vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the model was built for {}",
            tokenizer.vocab.len(),
            model.config().vocab_size
        )));
    }
    if cfg.max_len > model.config().max_infer_len {
        return Err(Error::Config(format!(
            "max_len {} exceeds the model limit {}",
            cfg.max_len,
            model.config().max_infer_len
        )));
    }
    Ok(())
}

/// Runs one stage for `cfg.schedule.total_steps` optimizer steps (or until
/// `max_epochs` is reached) and returns the per-step loss log.
pub fn run_stage(
    cfg: &StageConfig,
    model: &mut EncoderModel,
    tokenizer: &TokenizerModel,
    data: StageData,
) -> Result<StageReport> {
    check_common(cfg, model, tokenizer)?;
    match (cfg.stage, data) {
        (Stage::Mlm, StageData::Chunks(chunks)) => run_mlm(cfg, model, tokenizer, chunks),
        (Stage::Contrastive | Stage::HardNegative, StageData::Pairs(pairs)) => {
            run_contrastive(cfg, model, tokenizer, pairs)
        }
        (stage, _) => Err(Error::Config(format!(
            "stage `{}` was given the wrong kind of data",
            stage.as_str()
        ))),
    }
}

/// Runs a stage, then writes the checkpoint (with its loss log inside) to
/// `out` and optionally a copy of the log to `log`.
pub fn train_to_dir(
    cfg: &StageConfig,
    model: &mut EncoderModel,
    tokenizer: &TokenizerModel,
    data: StageData,
    out: &Path,
    log: Option<&Path>,
) -> Result<StageReport> {
    let report = run_stage(cfg, model, tokenizer, data)?;
    model.save(out, tokenizer, Some(cfg.stage.as_str()))?;
    write_jsonl(&out.join(TRAIN_LOG_FILE), &report.records)?;
    if let Some(path) = log {
        write_jsonl(path, &report.records)?;
    }
    Ok(report)
}

struct MlmJob {
    ids: Vec<u32>,
    mask: Vec<u8>,
    positions: Vec<usize>,
    targets: Vec<u32>,
}

fn mlm_grads(model: &EncoderModel, job: &MlmJob, scale: f64) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = model.tape();
    let b = model.bind(&tape, true);
    let loss = model.mlm_loss(&b, &job.ids, &job.mask, &job.positions, &job.targets)?;
    let value = tape.value(loss).item()?;
    let scaled = tape.scale(loss, scale);
    tape.backward(scaled)?;
    Ok((value, b.gradients()))
}

fn run_mlm(cfg: &StageConfig, model: &mut EncoderModel, tokenizer: &TokenizerModel, chunks: &[Vec<u32>]) -> Result<StageReport> {
    let chunks: Vec<&Vec<u32>> = chunks.iter().filter(|c| !c.is_empty()).collect();
    if chunks.is_empty() {
        return Err(Error::invalid("no MLM training chunks"));
    }
    let vocab = &tokenizer.vocab;
    let mask_id = vocab.special_id(MASK)?;
    let random_pool: Vec<u32> = (0..vocab.len() as u32).filter(|&i| !vocab.is_special(i)).collect();
    let policy = MaskPolicy {
        mask_token_prob: cfg.mask_token_prob,
        random_token_prob: cfg.random_token_prob,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(cfg.optimizer);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut report = StageReport {
        records: Vec::new(),
        steps: 0,
        dropped_partial_batch: false,
    };
    let mut tokens_seen = 0u64;
    'steps: for step in 1..=cfg.schedule.total_steps {
        let mut jobs = Vec::with_capacity(cfg.global_batch);
        while jobs.len() < cfg.global_batch {
            if cursor == order.len() {
                if !order.is_empty() {
                    epoch += 1;
                }
                if cfg.max_epochs.is_some_and(|m| epoch >= m) {
                    if !jobs.is_empty() {
                        log::warn!(
                            "data exhausted after {} of {} sequences of step {step}; partial batch dropped",
                            jobs.len(),
                            cfg.global_batch
                        );
                        report.dropped_partial_batch = true;
                    }
                    break 'steps;
                }
                order = (0..chunks.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ids: Vec<u32> = chunks[order[cursor]].iter().take(cfg.max_len).copied().collect();
            cursor += 1;
            let seq = EncodedSequence::from_ids(vocab, &ids)?;
            let selected: BTreeSet<usize> = select_whole_word_mask(&seq, cfg.mask_rate, &mut rng);
            let (corrupted, targets) = apply_mask_with(&ids, &selected, mask_id, policy, &random_pool, &mut rng)?;
            jobs.push(MlmJob {
                mask: vec![1; corrupted.len()],
                ids: corrupted,
                positions: selected.into_iter().collect(),
                targets,
            });
        }
        let scale = 1.0 / cfg.global_batch as f64;
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for chunk in jobs.chunks(CHUNK) {
            let results: Vec<Result<Option<(f64, BTreeMap<String, Tensor>)>>> = chunk
                .par_iter()
                .map(|job| {
                    if job.positions.is_empty() {
                        Ok(None)
                    } else {
                        mlm_grads(model, job, scale).map(Some)
                    }
                })
                .collect();
            for r in results {
                if let Some((loss, g)) = r? {
                    loss_sum += loss;
                    counted += 1;
                    accumulate(&mut grads, g, 1.0);
                }
            }
        }
        tokens_seen += jobs.iter().map(|j| j.ids.len() as u64).sum::<u64>();
        let lr = lr_at(&cfg.schedule, cfg.optimizer.lr, step)?;
        let precision = model.config().precision;
        adamw_step(model.params_mut(), &grads, &mut state, lr, precision)?;
        report.records.push(LossRecord {
            step,
            stage: cfg.stage.as_str().to_string(),
            lr,
            loss: if counted > 0 { loss_sum / counted as f64 } else { 0.0 },
            tokens_seen,
        });
        report.steps = step;
    }
    Ok(report)
}

fn encode_text(tokenizer: &TokenizerModel, text: &str, max_len: usize) -> Result<EncodedSequence> {
    let mut seq = tokenizer.encode(text);
    seq.truncate(max_len);
    if seq.is_empty() {
        return Err(Error::invalid(format!("training text produces no tokens: {text:?}")));
    }
    Ok(seq)
}

/// Embeds every sequence without recording gradients.
fn embed_all(model: &EncoderModel, seqs: &[&EncodedSequence]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        let part: Vec<Result<Vec<f64>>> = chunk
            .par_iter()
            .map(|s| model.embed_ids(&s.ids, &s.attention_mask))
            .collect();
        for e in part {
            out.push(e?);
        }
    }
    Ok(out)
}

/// Gradient of `sum(embedding(seq) * upstream)` with respect to the parameters.
fn backprop_embedding(model: &EncoderModel, seq: &EncodedSequence, upstream: &[f64]) -> Result<BTreeMap<String, Tensor>> {
    let tape = model.tape();
    let b = model.bind(&tape, true);
    let e = model.embed_var(&b, &seq.ids, &seq.attention_mask)?;
    let g = tape.constant(Tensor::vector(upstream.to_vec()));
    let prod = tape.mul(e, g)?;
    let surrogate = tape.sum(prod);
    tape.backward(surrogate)?;
    Ok(b.gradients())
}

/// Loss and parameter gradients for one contrastive batch. `seqs` holds `b`
/// queries, then `b` positives, then `h` negatives per item (item-major).
///
/// The loss is evaluated once on detached embeddings; each sequence is then
/// re-encoded and backpropagated with its embedding gradient, so the result
/// equals the full-batch gradient while only one sequence graph is alive at a
/// time per worker.
pub fn cached_contrastive_gradients(
    model: &EncoderModel,
    seqs: &[&EncodedSequence],
    b: usize,
    h: usize,
    opts: ContrastiveOptions,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if seqs.len() != b * (2 + h) {
        return Err(Error::shape(format!("{} sequences for batch {b} with {h} negatives", seqs.len())));
    }
    let d = model.config().hidden;
    let embs = embed_all(model, seqs)?;
    let tape = model.tape();
    let q = matrix_var(&tape, &embs[..b], vec![b, d])?;
    let p = matrix_var(&tape, &embs[b..2 * b], vec![b, d])?;
    let n = if h > 0 {
        Some(matrix_var(&tape, &embs[2 * b..], vec![b, h, d])?)
    } else {
        None
    };
    let loss = hard_negative_loss(&tape, q, p, n, opts)?;
    let loss_value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let mut upstream: Vec<f64> = Vec::with_capacity(seqs.len() * d);
    for v in [Some(q), Some(p), n].into_iter().flatten() {
        upstream.extend(tape.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]));
    }
    drop(tape);

    let mut grads = BTreeMap::new();
    let jobs: Vec<(usize, &EncodedSequence)> = seqs.iter().copied().enumerate().collect();
    for chunk in jobs.chunks(CHUNK) {
        let part: Vec<Result<BTreeMap<String, Tensor>>> = chunk
            .par_iter()
            .map(|&(j, s)| backprop_embedding(model, s, &upstream[j * d..(j + 1) * d]))
            .collect();
        for g in part {
            accumulate(&mut grads, g?, 1.0);
        }
    }
    Ok((loss_value, grads))
}

fn matrix_var(tape: &crate::numerics::Tape, rows: &[Vec<f64>], shape: Vec<usize>) -> Result<Var> {
    Ok(tape.param(Tensor::new(shape, rows.concat())?))
}

fn run_contrastive(
    cfg: &StageConfig,
    model: &mut EncoderModel,
    tokenizer: &TokenizerModel,
    pairs: &[PairExample],
) -> Result<StageReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let hard = cfg.stage == Stage::HardNegative;
    let encoded: Vec<(EncodedSequence, EncodedSequence, Vec<EncodedSequence>)> = pairs
        .iter()
        .map(|p| {
            let negs = if hard {
                p.negatives
                    .iter()
                    .map(|n| encode_text(tokenizer, n, cfg.max_len))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok((
                encode_text(tokenizer, &p.query, cfg.max_len)?,
                encode_text(tokenizer, &p.positive, cfg.max_len)?,
                negs,
            ))
        })
        .collect::<Result<_>>()?;
    let sources: Vec<&str> = pairs.iter().map(|p| p.source_id.as_str()).collect();
    let mut sampler = SingleSourceSampler::new(&sources, cfg.global_batch, cfg.max_epochs)?;
    let opts = ContrastiveOptions {
        temperature: cfg.temperature,
        symmetric: cfg.symmetric_loss,
        in_batch_negatives: cfg.in_batch_negatives,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(cfg.optimizer);
    let mut report = StageReport {
        records: Vec::new(),
        steps: 0,
        dropped_partial_batch: false,
    };
    let mut tokens_seen = 0u64;
    for step in 1..=cfg.schedule.total_steps {
        let Some(batch) = sampler.next_batch(&mut rng) else {
            log::info!("data exhausted after {} steps", report.steps);
            break;
        };
        let b = batch.items.len();
        let h = if hard {
            batch.items.iter().map(|&i| encoded[i].2.len()).min().unwrap_or(0)
        } else {
            0
        };
        // Sequence order: queries, positives, then each item's first `h` negatives.
        let mut seqs: Vec<&EncodedSequence> = Vec::with_capacity(b * (2 + h));
        seqs.extend(batch.items.iter().map(|&i| &encoded[i].0));
        seqs.extend(batch.items.iter().map(|&i| &encoded[i].1));
        for &i in &batch.items {
            seqs.extend(encoded[i].2.iter().take(h));
        }
        let (loss_value, grads) = cached_contrastive_gradients(model, &seqs, b, h, opts)?;
        tokens_seen += seqs.iter().map(|s| s.len() as u64).sum::<u64>();
        let lr = lr_at(&cfg.schedule, cfg.optimizer.lr, step)?;
        let precision = model.config().precision;
        adamw_step(model.params_mut(), &grads, &mut state, lr, precision)?;
        report.records.push(LossRecord {
            step,
            stage: cfg.stage.as_str().to_string(),
            lr,
            loss: loss_value,
            tokens_seen,
        });
        report.steps = step;
    }
    Ok(report)
}
