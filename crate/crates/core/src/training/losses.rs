use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Options shared by both contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// Average the query→target loss with the target→query loss.
    pub symmetric: bool,
    /// Score each query against every target in the batch, not just its own.
    pub in_batch_negatives: bool,
}

impl ContrastiveOptions {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            symmetric: false,
            in_batch_negatives: true,
        }
    }
}

/// InfoNCE over `[B, d]` unit-vector rows: query `i` should pick target `i`
/// among all `B` targets.
pub fn info_nce_loss(tape: &Tape, queries: Var, positives: Var, temperature: f64) -> Result<Var> {
    hard_negative_loss(tape, queries, positives, None, ContrastiveOptions::new(temperature))
}

/// InfoNCE whose denominator also holds each query's own hard negatives,
/// given as `[B, H, d]`. With `None` or `H = 0` this is exactly [`info_nce_loss`].
pub fn hard_negative_loss(
    tape: &Tape,
    queries: Var,
    positives: Var,
    negatives: Option<Var>,
    opts: ContrastiveOptions,
) -> Result<Var> {
    let (qs, ps) = (tape.shape(queries), tape.shape(positives));
    if qs.len() != 2 || qs != ps {
        return Err(Error::shape(format!("queries {qs:?} and positives {ps:?} must be equal [B, d]")));
    }
    let (b, d) = (qs[0], qs[1]);
    if b == 0 {
        return Err(Error::invalid("contrastive loss needs at least one pair"));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {} must be positive", opts.temperature)));
    }
    let negatives = match negatives {
        Some(n) => {
            let ns = tape.shape(n);
            if ns.len() != 3 || ns[0] != b || ns[2] != d {
                return Err(Error::shape(format!("negatives {ns:?} must be [{b}, H, {d}]")));
            }
            (ns[1] > 0).then_some((n, ns[1]))
        }
        None => None,
    };

    let pt = tape.transpose(positives)?;
    let sims = tape.matmul(queries, pt)?;
    let (mut logits, targets): (Var, Vec<usize>) = if opts.in_batch_negatives {
        (sims, (0..b).collect())
    } else {
        let diag = tape.pick(sims, &(0..b).collect::<Vec<_>>())?;
        (tape.reshape(diag, &[b, 1])?, vec![0; b])
    };
    if let Some((n, h)) = negatives {
        let q3 = tape.reshape(queries, &[b, 1, d])?;
        let nt = tape.transpose(n)?;
        let neg = tape.bmm(q3, nt)?;
        let neg = tape.reshape(neg, &[b, h])?;
        logits = tape.concat(&[logits, neg], 1)?;
    }
    let logits = tape.scale(logits, 1.0 / opts.temperature);
    let forward = tape.cross_entropy(logits, &targets)?;
    if !(opts.symmetric && opts.in_batch_negatives) {
        return Ok(forward);
    }
    let back = tape.transpose(sims)?;
    let back = tape.scale(back, 1.0 / opts.temperature);
    let backward = tape.cross_entropy(back, &(0..b).collect::<Vec<_>>())?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}
