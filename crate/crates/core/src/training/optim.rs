use std::collections::BTreeMap;

use super::config::{OptimizerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Precision, Tensor};

/// Adam moments for every parameter that has received a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One decoupled-weight-decay Adam step over the parameters present in
/// `grads`; other parameters are left alone. Nothing changes when any
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    precision: Precision,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = precision.round(*w - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w));
        }
    }
    Ok(())
}

/// Linear warmup to `peak` then linear decay to zero at `total_steps`.
pub fn lr_at(schedule: &ScheduleConfig, peak: f64, step: usize) -> Result<f64> {
    let total = schedule.total_steps;
    if step > total {
        return Err(Error::invalid(format!("step {step} is past the schedule end {total}")));
    }
    let warm = schedule.warmup_steps();
    Ok(if step <= warm {
        peak * step as f64 / warm as f64
    } else {
        peak * (total - step) as f64 / (total - warm) as f64
    })
}

/// Adds `src` into `acc`, scaled by `scale`.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in src {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b),
            None => {
                let mut g = g;
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                acc.insert(name, g);
            }
        }
    }
}
