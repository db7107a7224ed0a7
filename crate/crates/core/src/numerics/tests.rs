use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct amount to the checked scalar.
fn probe(tape: &Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y);
    let w = tape.constant(random(&shape, 999));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check1(f: impl Fn(&Tape, Var) -> Result<Var>, shape: &[usize], seed: u64) -> f64 {
    grad_check(|t, x| probe(t, f(t, x)?), &random(shape, seed), 1e-5).unwrap()
}

fn check2(f: impl Fn(&Tape, Var, Var) -> Result<Var>, a: &[usize], b: &[usize]) -> f64 {
    grad_check_many(
        |t, v| probe(t, f(t, v[0], v[1])?),
        &[random(a, 1), random(b, 2)],
        1e-5,
        Coordinates::All,
    )
    .unwrap()
    .max_relative_error
}

#[test]
fn every_op_passes_grad_check() {
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check2(|t, a, b| t.matmul(a, b), &[3, 4], &[4, 2])),
        ("matmul_batched", check2(|t, a, b| t.matmul(a, b), &[2, 3, 4], &[4, 2])),
        ("bmm", check2(|t, a, b| t.bmm(a, b), &[2, 3, 4], &[2, 4, 5])),
        ("add", check2(|t, a, b| t.add(a, b), &[3, 4], &[3, 4])),
        ("add_bias", check2(|t, a, b| t.add(a, b), &[3, 4], &[4])),
        ("sub", check2(|t, a, b| t.sub(a, b), &[3, 4], &[4])),
        ("mul", check2(|t, a, b| t.mul(a, b), &[3, 4], &[3, 4])),
        ("mul_bias", check2(|t, a, b| t.mul(a, b), &[2, 3, 4], &[4])),
        ("concat", check2(|t, a, b| t.concat(&[a, b], 1), &[3, 2], &[3, 4])),
        ("scale", check1(|t, x| Ok(t.scale(x, -2.5)), &[3, 4], 3)),
        ("transpose", check1(|t, x| t.transpose(x), &[3, 4], 4)),
        ("reshape", check1(|t, x| t.reshape(x, &[2, 6]), &[3, 4], 5)),
        ("slice", check1(|t, x| t.slice(x, 1, 1, 3), &[3, 4], 6)),
        ("select_rows", check1(|t, x| t.select_rows(x, &[2, 0, 2]), &[3, 4], 7)),
        ("pick", check1(|t, x| t.pick(x, &[1, 3, 0]), &[3, 4], 8)),
        ("softmax", check1(|t, x| t.softmax(x, 1), &[3, 4], 9)),
        ("softmax_axis0", check1(|t, x| t.softmax(x, 0), &[3, 4], 10)),
        ("log_softmax", check1(|t, x| t.log_softmax(x, 1), &[3, 4], 11)),
        ("layer_norm", check1(|t, x| t.layer_norm(x, 1e-12), &[3, 5], 12)),
        ("gelu", check1(|t, x| Ok(t.gelu(x)), &[3, 4], 13)),
        ("tanh", check1(|t, x| Ok(t.tanh(x)), &[3, 4], 14)),
        ("mean", check1(|t, x| t.mean(x), &[3, 4], 15)),
        ("sum", check1(|t, x| Ok(t.sum(x)), &[3, 4], 16)),
        ("sum_axis", check1(|t, x| t.sum_axis(x, 0), &[3, 4], 17)),
        ("masked_fill", check1(|t, x| t.masked_fill(x, &[true, false, false, true, false, false], 3.0), &[2, 3], 18)),
        ("l2_normalize", check1(|t, x| t.l2_normalize(x), &[3, 4], 19)),
        ("cross_entropy", check1(|t, x| t.cross_entropy(x, &[1, 0, 3]), &[3, 4], 20)),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: max relative error {err:e}");
    }
}

#[test]
fn quadratic_is_checked_to_roundoff() {
    let x = random(&[6], 3);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new(Precision::F64);
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn mean_matmul_matches_finite_differences() {
    let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
    let b = Tensor::matrix(3, 2, vec![0.25, 1.0, -1.5, 2.0, 0.75, -0.5]).unwrap();
    let report = grad_check_many(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.mean(p)
        },
        &[a, b],
        1e-5,
        Coordinates::All,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-8, "{report:?}");
}

#[test]
fn constant_graph_has_no_gradients() {
    let tape = Tape::new(Precision::F64);
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new(Precision::F64);
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn softmax_of_constant_is_uniform() {
    let tape = Tape::new(Precision::F64);
    let x = tape.constant(Tensor::full(vec![1, 5], 3.7));
    let y = tape.softmax(x, 1).unwrap();
    for v in tape.value(y).data() {
        assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
    let tape = Tape::new(Precision::F64);
    let x = tape.constant(random(&[4, 7], 21));
    let s = tape.softmax(x, 1).unwrap();
    let ls = tape.log_softmax(x, 1).unwrap();
    let (s, ls) = (tape.value(s).clone(), tape.value(ls).clone());
    for r in 0..4 {
        assert_abs_diff_eq!(s.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        for (p, lp) in s.row(r).iter().zip(ls.row(r)) {
            assert_abs_diff_eq!(p.ln(), *lp, epsilon = 1e-5);
        }
    }
}

#[test]
fn layer_norm_standardizes() {
    let tape = Tape::new(Precision::F64);
    let x = tape.constant(random(&[3, 16], 22));
    let y = tape.layer_norm(x, 1e-12).unwrap();
    let y = tape.value(y).clone();
    for r in 0..3 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-5);
    }
}

#[test]
fn layer_norm_rejects_empty_axis() {
    let tape = Tape::new(Precision::F64);
    let x = tape.constant(Tensor::zeros(vec![2, 0]));
    assert!(tape.layer_norm(x, 1e-5).is_err());
}

#[test]
fn cross_entropy_of_flat_logits_is_ln2() {
    let tape = Tape::new(Precision::F64);
    let x = tape.constant(Tensor::zeros(vec![1, 2]));
    let loss = tape.cross_entropy(x, &[0]).unwrap();
    assert_abs_diff_eq!(tape.value(loss).item().unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn shape_mismatches_are_errors() {
    let tape = Tape::new(Precision::F64);
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(tape.matmul(a, b).is_err());
    let c = tape.constant(Tensor::zeros(vec![3]));
    assert!(tape.add(c, a).is_err());
    assert!(tape.slice(a, 1, 2, 4).is_err());
}

#[test]
fn f32_mode_rounds_outputs() {
    let tape = Tape::new(Precision::F32);
    let x = tape.constant(Tensor::scalar(0.1));
    assert_eq!(tape.value(x).data()[0], 0.1f32 as f64);
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let tape = Tape::new(Precision::F32);
        let a = tape.param(random(&[5, 8], 30));
        let b = tape.param(random(&[8, 3], 31));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax(p, 1).unwrap();
        let loss = tape.cross_entropy(s, &[0, 1, 2, 0, 1]).unwrap();
        tape.backward(loss).unwrap();
        let l = tape.value(loss).item().unwrap();
        (l, tape.grad(a).unwrap(), tape.grad(b).unwrap())
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(ga1, ga2);
    assert_eq!(gb1, gb2);
}
