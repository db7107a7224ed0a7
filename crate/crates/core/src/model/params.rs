use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Vec<Init>,
}

impl ParamSpec {
    fn uniform(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init: vec![init] }
    }
}

/// Every parameter of the model, in initialization order.
pub(crate) fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    use Init::*;
    let d = c.hidden;
    let mut out = vec![ParamSpec::uniform("embedding.base_table".into(), vec![c.vocab_size, d], Normal)];
    for k in 0..c.num_projections {
        out.push(ParamSpec::uniform(format!("embedding.projection.{k}"), vec![d, d], Normal));
    }
    out.push(ParamSpec::uniform("embedding.scorer".into(), vec![c.num_projections, d], Normal));
    for l in 0..c.layers {
        let p = format!("layers.{l}");
        let mut push = |n: &str, shape: Vec<usize>, init| out.push(ParamSpec::uniform(format!("{p}.{n}"), shape, init));
        push("ln1.gamma", vec![d], Ones);
        push("ln1.beta", vec![d], Zeros);
        for m in ["q", "k", "v", "o"] {
            push(&format!("attn.{m}.weight"), vec![d, d], Normal);
            push(&format!("attn.{m}.bias"), vec![d], Zeros);
        }
        push("ln2.gamma", vec![d], Ones);
        push("ln2.beta", vec![d], Zeros);
        push("ffn.in.weight", vec![d, c.ffn_dim], Normal);
        push("ffn.in.bias", vec![c.ffn_dim], Zeros);
        push("ffn.out.weight", vec![c.ffn_dim, d], Normal);
        push("ffn.out.bias", vec![d], Zeros);
    }
    out.push(ParamSpec::uniform("mlm_head.pre_norm.gamma".into(), vec![d], Ones));
    out.push(ParamSpec::uniform("mlm_head.pre_norm.beta".into(), vec![d], Zeros));
    let cut = &c.adaptive_cutoffs;
    let width = cut[0] + c.tail_count();
    out.push(ParamSpec::uniform("mlm_head.head.weight".into(), vec![d, width], Normal));
    // Gate logits start at ln(cluster size): with zero weights every token is equally likely.
    let mut bias_init = vec![Zeros; cut[0]];
    for i in 1..cut.len() {
        bias_init.push(Const(((cut[i] - cut[i - 1]) as f64).ln()));
    }
    out.push(ParamSpec {
        name: "mlm_head.head.bias".into(),
        shape: vec![width],
        init: bias_init,
    });
    for i in 1..cut.len() {
        let dim = c.tail_dim(i);
        out.push(ParamSpec::uniform(format!("mlm_head.tail.{i}.down"), vec![d, dim], Normal));
        out.push(ParamSpec::uniform(format!("mlm_head.tail.{i}.out"), vec![dim, cut[i] - cut[i - 1]], Normal));
    }
    out
}

pub(crate) fn init_params(c: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, c.init_std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
    let mut store = ParamStore::new();
    for spec in param_specs(c) {
        let n: usize = spec.shape.iter().product();
        let data = (0..n)
            .map(|i| match spec.init[if spec.init.len() == 1 { 0 } else { i }] {
                Init::Normal => normal.sample(&mut rng),
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Const(v) => v,
            })
            .map(|v| c.precision.round(v))
            .collect();
        store.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `c` calls for.
pub(crate) fn check_store(c: &ModelConfig, store: &ParamStore) -> Result<()> {
    let specs = param_specs(c);
    if specs.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            specs.len(),
            store.len()
        )));
    }
    for s in specs {
        match store.get(&s.name) {
            Some(t) if t.shape() == s.shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing tensor `{}`", s.name))),
        }
    }
    Ok(())
}

/// Parameters placed on a tape on first use.
pub struct Bound<'a> {
    tape: &'a Tape,
    source: Option<(&'a ParamStore, bool)>,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            source: Some((store, trainable)),
            vars: RefCell::default(),
        }
    }

    /// Uses already-registered variables, e.g. from a gradient check.
    pub fn from_vars(tape: &'a Tape, vars: BTreeMap<String, Var>) -> Self {
        Self {
            tape,
            source: None,
            vars: RefCell::new(vars),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let (store, trainable) = self
            .source
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))?;
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = if trainable { self.tape.param(t) } else { self.tape.constant(t) };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter that received one.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(n, &v)| self.tape.grad(v).map(|g| (n.clone(), g)))
            .collect()
    }
}
