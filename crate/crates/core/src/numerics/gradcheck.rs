//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Precision, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Which coordinates of each input are perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Coordinates {
    All,
    /// Up to `per_tensor` distinct coordinates per input, drawn with `seed`.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, flat coordinate) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the analytic gradient of `f` at `x` and central
/// differences with step `h`. Runs in 64-bit mode.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, Coordinates::All)?;
    Ok(report.max_relative_error)
}

/// Multi-input variant of [`grad_check`], used for whole-model losses where
/// perturbing every parameter would be prohibitively slow.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let value = tape.value(loss).item()?;
        Ok(value)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let picks: Vec<usize> = match coords {
            Coordinates::All => (0..input.numel()).collect(),
            Coordinates::Sampled { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut idx = sample(&mut rng, input.numel(), per_tensor.min(input.numel())).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in picks {
            let orig = input.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[ti][i], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((ti, i));
            }
        }
    }
    Ok(report)
}
