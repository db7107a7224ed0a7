use super::params::Bound;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Frequency rank of each token id: rank 0 is the most frequent. Ties go to
/// the lower id.
pub fn frequency_ranks(counts: &[u64]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0u32; counts.len()];
    for (r, id) in order.into_iter().enumerate() {
        rank[id] = r as u32;
    }
    rank
}

/// Layout of the MLM output: a head over the most frequent tokens plus one
/// gate per tail cluster, and a reduced-width softmax inside each tail.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSoftmaxHead {
    pub cutoffs: Vec<usize>,
    /// `rank_of[token_id]`
    pub rank_of: Vec<u32>,
    pub layer_norm_eps: f64,
}

impl AdaptiveSoftmaxHead {
    pub fn new(cutoffs: Vec<usize>, rank_of: Vec<u32>, layer_norm_eps: f64) -> Result<Self> {
        let v = rank_of.len();
        if cutoffs.last() != Some(&v) || cutoffs.first() == Some(&0) || cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("invalid cutoffs {cutoffs:?} for vocabulary of {v}")));
        }
        let mut seen = vec![false; v];
        for &r in &rank_of {
            let r = r as usize;
            if r >= v || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Config("token ranks are not a permutation".into()));
            }
        }
        Ok(Self {
            cutoffs,
            rank_of,
            layer_norm_eps,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.rank_of.len()
    }

    /// (cluster, offset within cluster); cluster 0 is the head.
    pub fn locate(&self, token: u32) -> Result<(usize, usize)> {
        let r = *self.rank_of.get(token as usize).ok_or(Error::UnknownTokenId(token))? as usize;
        let cluster = self.cutoffs.iter().position(|&c| r < c).expect("last cutoff is vocab size");
        let start = if cluster == 0 { 0 } else { self.cutoffs[cluster - 1] };
        Ok((cluster, r - start))
    }

    fn normed(&self, b: &Bound, hidden: Var) -> Result<Var> {
        let t = b.tape();
        let x = t.layer_norm(hidden, self.layer_norm_eps)?;
        let x = t.mul(x, b.var("mlm_head.pre_norm.gamma")?)?;
        t.add(x, b.var("mlm_head.pre_norm.beta")?)
    }

    fn head_log_probs(&self, b: &Bound, normed: Var) -> Result<Var> {
        let t = b.tape();
        let logits = t.matmul(normed, b.var("mlm_head.head.weight")?)?;
        let logits = t.add(logits, b.var("mlm_head.head.bias")?)?;
        t.log_softmax(logits, 1)
    }

    fn tail_log_probs(&self, b: &Bound, normed: Var, cluster: usize) -> Result<Var> {
        let t = b.tape();
        let z = t.matmul(normed, b.var(&format!("mlm_head.tail.{cluster}.down"))?)?;
        let logits = t.matmul(z, b.var(&format!("mlm_head.tail.{cluster}.out"))?)?;
        t.log_softmax(logits, 1)
    }

    /// Mean negative log-likelihood of `targets` given hidden rows `[N, d]`.
    pub fn nll(&self, b: &Bound, hidden: Var, targets: &[u32]) -> Result<Var> {
        let t = b.tape();
        if targets.is_empty() || t.shape(hidden).first() != Some(&targets.len()) {
            return Err(Error::shape(format!(
                "{} targets for hidden rows {:?}",
                targets.len(),
                t.shape(hidden)
            )));
        }
        let normed = self.normed(b, hidden)?;
        let head = self.head_log_probs(b, normed)?;
        let mut groups: Vec<(Vec<usize>, Vec<usize>)> = vec![Default::default(); self.cutoffs.len()];
        for (row, &tok) in targets.iter().enumerate() {
            let (c, off) = self.locate(tok)?;
            groups[c].0.push(row);
            groups[c].1.push(off);
        }
        let mut terms = Vec::new();
        for (c, (rows, offs)) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let head_rows = t.select_rows(head, rows)?;
            if c == 0 {
                terms.push(t.pick(head_rows, offs)?);
                continue;
            }
            let gate = self.cutoffs[0] + c - 1;
            terms.push(t.pick(head_rows, &vec![gate; rows.len()])?);
            let sub = t.select_rows(normed, rows)?;
            let tail = self.tail_log_probs(b, sub, c)?;
            terms.push(t.pick(tail, offs)?);
        }
        let all = t.concat(&terms, 0)?;
        let total = t.sum(all);
        Ok(t.scale(total, -1.0 / targets.len() as f64))
    }

    /// Full `[N, V]` log-distribution, columns in token-id order.
    pub fn log_probs(&self, b: &Bound, hidden: Var) -> Result<Tensor> {
        let t = b.tape();
        let normed = self.normed(b, hidden)?;
        let head = t.value(self.head_log_probs(b, normed)?).clone();
        let tails = (1..self.cutoffs.len())
            .map(|c| Ok(t.value(self.tail_log_probs(b, normed, c)?).clone()))
            .collect::<Result<Vec<_>>>()?;
        let n = head.shape()[0];
        let v = self.vocab_size();
        let mut out = vec![0.0; n * v];
        for row in 0..n {
            let h = head.row(row);
            for tok in 0..v {
                let (c, off) = self.locate(tok as u32)?;
                out[row * v + tok] = if c == 0 {
                    h[off]
                } else {
                    h[self.cutoffs[0] + c - 1] + tails[c - 1].row(row)[off]
                };
            }
        }
        Tensor::new(vec![n, v], out)
    }
}
