use super::adaptive::{frequency_ranks, AdaptiveSoftmaxHead};
use super::alibi::{alibi_bias_matrix, alibi_slopes, AlibiBias};
use super::config::ModelConfig;
use super::embedding::MultiProjEmbedding;
use super::params::{check_store, init_params, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenizer::TokenizerModel;

/// Pre-norm transformer encoder with ALiBi attention, a multi-projection
/// embedding and an adaptive-softmax MLM head. There is no position table.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    alibi: AlibiBias,
    head: AdaptiveSoftmaxHead,
}

impl EncoderModel {
    /// `token_counts` orders the adaptive-softmax clusters; without counts
    /// the vocabulary order is used.
    pub fn new(config: ModelConfig, token_counts: Option<&[u64]>, seed: u64) -> Result<Self> {
        let config = config.validated()?;
        let ranks = match token_counts {
            Some(c) if c.len() != config.vocab_size => {
                return Err(Error::Config(format!(
                    "{} token counts for vocabulary of {}",
                    c.len(),
                    config.vocab_size
                )))
            }
            Some(c) => frequency_ranks(c),
            None => (0..config.vocab_size as u32).collect(),
        };
        let params = init_params(&config, seed)?;
        Self::from_parts(config, params, ranks)
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, rank_of: Vec<u32>) -> Result<Self> {
        let config = config.validated()?;
        check_store(&config, &params)?;
        let alibi = alibi_slopes(config.heads)?;
        let head = AdaptiveSoftmaxHead::new(config.adaptive_cutoffs.clone(), rank_of, config.layer_norm_eps)?;
        Ok(Self {
            config,
            params,
            alibi,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn alibi(&self) -> &AlibiBias {
        &self.alibi
    }

    pub fn mlm_head(&self) -> &AdaptiveSoftmaxHead {
        &self.head
    }

    pub fn embedding(&self) -> MultiProjEmbedding {
        MultiProjEmbedding {
            vocab_size: self.config.vocab_size,
            hidden: self.config.hidden,
            num_projections: self.config.num_projections,
        }
    }

    /// A tape configured for this model's precision.
    pub fn tape(&self) -> Tape {
        Tape::new(self.config.precision).with_bf16_matmul(self.config.bf16_matmul)
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape, trainable: bool) -> Bound<'a> {
        Bound::new(tape, &self.params, trainable)
    }

    fn linear(&self, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let t = b.tape();
        let y = t.matmul(x, b.var(&format!("{prefix}.weight"))?)?;
        t.add(y, b.var(&format!("{prefix}.bias"))?)
    }

    fn norm(&self, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let t = b.tape();
        let y = t.layer_norm(x, self.config.layer_norm_eps)?;
        let y = t.mul(y, b.var(&format!("{prefix}.gamma"))?)?;
        t.add(y, b.var(&format!("{prefix}.beta"))?)
    }

    fn attention(&self, b: &Bound, x: Var, layer: usize, pad: &[bool]) -> Result<Var> {
        let t = b.tape();
        let p = format!("layers.{layer}.attn");
        let q = self.linear(b, x, &format!("{p}.q"))?;
        let k = self.linear(b, x, &format!("{p}.k"))?;
        let v = self.linear(b, x, &format!("{p}.v"))?;
        let s = pad.len();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for (h, &slope) in self.alibi.slopes.iter().enumerate() {
            let qh = t.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = t.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = t.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let scores = t.scale(scores, scale);
            let mut bias = alibi_bias_matrix(s, slope);
            for row in bias.data_mut().chunks_mut(s) {
                for (j, b) in row.iter_mut().enumerate() {
                    if pad[j] {
                        *b = f64::NEG_INFINITY;
                    }
                }
            }
            let scores = t.add(scores, t.constant(bias))?;
            let probs = t.softmax(scores, 1)?;
            heads.push(t.matmul(probs, vh)?);
        }
        let merged = t.concat(&heads, 1)?;
        self.linear(b, merged, &format!("{p}.o"))
    }

    /// Contextual states `[len, hidden]` for one sequence. Positions whose
    /// mask is 0 are padding: no position attends to them.
    pub fn encode(&self, b: &Bound, ids: &[u32], mask: &[u8]) -> Result<Var> {
        if ids.len() != mask.len() {
            return Err(Error::shape(format!("{} ids with {} mask entries", ids.len(), mask.len())));
        }
        if ids.len() > self.config.max_infer_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the limit of {}",
                ids.len(),
                self.config.max_infer_len
            )));
        }
        let pad: Vec<bool> = mask.iter().map(|&m| m == 0).collect();
        if pad.iter().all(|&p| p) {
            return Err(Error::invalid("sequence has no unmasked positions"));
        }
        let t = b.tape();
        let mut x = self.embedding().forward(b, ids)?;
        for l in 0..self.config.layers {
            let h = self.norm(b, x, &format!("layers.{l}.ln1"))?;
            let a = self.attention(b, h, l, &pad)?;
            x = t.add(x, a)?;
            let h = self.norm(b, x, &format!("layers.{l}.ln2"))?;
            let f = self.linear(b, h, &format!("layers.{l}.ffn.in"))?;
            let f = t.gelu(f);
            let f = self.linear(b, f, &format!("layers.{l}.ffn.out"))?;
            x = t.add(x, f)?;
        }
        Ok(x)
    }

    /// Mean of the unmasked rows of `states`.
    pub fn mean_pool(&self, b: &Bound, states: Var, mask: &[u8]) -> Result<Var> {
        let t = b.tape();
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] != 0).collect();
        if rows.is_empty() {
            return Err(Error::invalid("cannot pool an empty sequence"));
        }
        let kept = t.select_rows(states, &rows)?;
        let summed = t.sum_axis(kept, 0)?;
        Ok(t.scale(summed, 1.0 / rows.len() as f64))
    }

    /// Sentence embedding `[hidden]` for one sequence on the given tape.
    pub fn embed_var(&self, b: &Bound, ids: &[u32], mask: &[u8]) -> Result<Var> {
        let states = self.encode(b, ids, mask)?;
        let mean = self.mean_pool(b, states, mask)?;
        b.tape().l2_normalize(mean)
    }

    pub fn embed_ids(&self, ids: &[u32], mask: &[u8]) -> Result<Vec<f64>> {
        let tape = self.tape();
        let b = self.bind(&tape, false);
        let e = self.embed_var(&b, ids, mask)?;
        let out = tape.value(e).data().to_vec();
        Ok(out)
    }

    /// Tokenizes `text` (truncated to the inference limit) and embeds it.
    pub fn embed_text(&self, tokenizer: &TokenizerModel, text: &str) -> Result<Vec<f64>> {
        let mut seq = tokenizer.encode(text);
        seq.truncate(self.config.max_infer_len);
        if seq.is_empty() {
            return Err(Error::invalid("text produced no tokens"));
        }
        self.embed_ids(&seq.ids, &seq.attention_mask)
    }

    /// Mean cross-entropy of the original tokens at `positions`.
    pub fn mlm_loss(&self, b: &Bound, ids: &[u32], mask: &[u8], positions: &[usize], targets: &[u32]) -> Result<Var> {
        if positions.len() != targets.len() || positions.is_empty() {
            return Err(Error::invalid(format!(
                "{} masked positions with {} targets",
                positions.len(),
                targets.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
            return Err(Error::invalid(format!("masked position {p} outside sequence of {}", ids.len())));
        }
        let states = self.encode(b, ids, mask)?;
        let rows = b.tape().select_rows(states, positions)?;
        self.head.nll(b, rows, targets)
    }

    /// `[len, V]` MLM log-probabilities for every position, columns by token id.
    pub fn mlm_log_probs(&self, ids: &[u32], mask: &[u8]) -> Result<Tensor> {
        let tape = self.tape();
        let b = self.bind(&tape, false);
        let states = self.encode(&b, ids, mask)?;
        self.head.log_probs(&b, states)
    }
}
