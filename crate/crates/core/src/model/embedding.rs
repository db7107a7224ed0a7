use super::params::Bound;
use crate::error::{Error, Result};
use crate::numerics::Var;

/// Token embedding as a learned mixture of K linear views of a shared table.
///
/// For token `t` with base row `e`: `h_k = e P_k`, `a = softmax_k(w_k . h_k)`,
/// output `sum_k a_k h_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiProjEmbedding {
    pub vocab_size: usize,
    pub hidden: usize,
    pub num_projections: usize,
}

impl MultiProjEmbedding {
    /// Returns `[len, hidden]`.
    pub fn forward(&self, b: &Bound, ids: &[u32]) -> Result<Var> {
        let t = b.tape();
        if ids.is_empty() {
            return Err(Error::invalid("cannot embed an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let (s, d, k) = (ids.len(), self.hidden, self.num_projections);
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = t.select_rows(b.var("embedding.base_table")?, &rows)?;
        let projections = (0..k)
            .map(|i| b.var(&format!("embedding.projection.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let p_all = t.concat(&projections, 1)?;
        let views = t.matmul(e, p_all)?;
        let views = t.reshape(views, &[s, k, d])?;
        let weighted = t.mul(views, b.var("embedding.scorer")?)?;
        let scores = t.sum_axis(weighted, 2)?;
        let alpha = t.softmax(scores, 1)?;
        let alpha = t.reshape(alpha, &[s, 1, k])?;
        let mixed = t.bmm(alpha, views)?;
        t.reshape(mixed, &[s, d])
    }
}
