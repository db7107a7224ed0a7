//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so the tape is always a valid
//! topological order and `backward` is a single reverse sweep.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use super::tensor::{round_bf16, split_axis, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Every op output is rounded to the nearest `f32`.
    #[default]
    F32,
    /// Full `f64`; used by the gradient checker.
    F64,
}

impl Precision {
    pub fn dtype(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    /// Rounds a value to the storage width of this precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { input: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    MaskedFill(Var, Vec<bool>),
    L2Normalize { input: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    precision: Precision,
    bf16_matmul: bool,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    /// Truncate matmul inputs to bfloat16 in the forward pass.
    pub fn with_bf16_matmul(mut self, enabled: bool) -> Self {
        self.bf16_matmul = enabled;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: receives a gradient on `backward`.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Tensor::new(shape, g.clone()).ok()
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    /// `a[..., m, k] · b[k, n]`; leading dimensions of `a` are treated as rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() < 2 || tb.rank() != 2 {
                return Err(Error::shape(format!(
                    "matmul needs rank>=2 x rank 2, got {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let k = *ta.shape().last().unwrap();
            let (kb, n) = (tb.shape()[0], tb.shape()[1]);
            if k != kb {
                return Err(Error::shape(format!(
                    "matmul inner dims differ: {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let rows = ta.numel() / k;
            let (da, db): (Cow<[f64]>, Cow<[f64]>) = if self.bf16_matmul {
                (
                    ta.data().iter().map(|&x| round_bf16(x)).collect(),
                    tb.data().iter().map(|&x| round_bf16(x)).collect(),
                )
            } else {
                (Cow::Borrowed(ta.data()), Cow::Borrowed(tb.data()))
            };
            let out = matmul_kernel(&da, &db, rows, k, n);
            let mut shape = ta.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::MatMul(a, b), self.any_grad(&[a, b])))
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
                return Err(Error::shape(format!(
                    "bmm needs [B,m,k] x [B,k,n], got {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let n = tb.shape()[2];
            if tb.shape()[1] != k {
                return Err(Error::shape(format!(
                    "bmm inner dims differ: {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut out = Vec::with_capacity(batch * m * n);
            for bi in 0..batch {
                let sa = &ta.data()[bi * m * k..(bi + 1) * m * k];
                let sb = &tb.data()[bi * k * n..(bi + 1) * k * n];
                out.extend(matmul_kernel(sa, sb, m, k, n));
            }
            Tensor::new(vec![batch, m, n], out)?
        };
        Ok(self.push(value, Op::Bmm(a, b), self.any_grad(&[a, b])))
    }

    fn binary_suffix(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        check_suffix(ta.shape(), tb.shape(), name)?;
        let nb = tb.numel();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), out)
    }

    /// Element-wise sum; `b` may have a shape equal to a suffix of `a`'s and is
    /// then repeated over the leading dimensions.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_suffix(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), self.any_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_suffix(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), self.any_grad(&[a, b])))
    }

    /// Element-wise product with the same leading-dimension rule as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_suffix(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.any_grad(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let t = self.value(a);
            let data = t.data().iter().map(|x| x * c).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        self.push(value, Op::Scale(a, c), self.any_grad(&[a]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if t.rank() < 2 {
                return Err(Error::shape(format!("transpose of rank {} tensor", t.rank())));
            }
            let r = t.rank();
            let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
            let batch = t.numel() / (m * n).max(1);
            let out = transpose_kernel(t.data(), batch, m, n);
            let mut shape = t.shape().to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::Transpose(a), self.any_grad(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), self.any_grad(&[a])))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            split_axis(&first, axis)?;
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let same_rank = s.len() == first.len();
                let compatible = same_rank
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(Error::shape(format!(
                        "concat along axis {axis}: {first:?} vs {s:?}"
                    )));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis)?;
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let len = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), self.any_grad(parts)))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (outer, n, inner) = split_axis(t.shape(), axis)?;
            if start > end || end > n {
                return Err(Error::shape(format!(
                    "slice {start}..{end} out of range for axis of length {n}"
                )));
            }
            let len = end - start;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner;
                out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)?
        };
        Ok(self.push(
            value,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            self.any_grad(&[a]),
        ))
    }

    /// Gathers entries along the first axis (an embedding lookup for rank 2).
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if t.rank() == 0 {
                return Err(Error::shape("select_rows on a scalar"));
            }
            let n = t.shape()[0];
            let width = t.numel() / n.max(1);
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r >= n {
                    return Err(Error::shape(format!("row {r} out of range for {n} rows")));
                }
                out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::SelectRows(a, rows.to_vec()), self.any_grad(&[a])))
    }

    /// `out[i] = a[i, idx[i]]` for a rank-2 `a`.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if t.rank() != 2 || t.shape()[0] != idx.len() {
                return Err(Error::shape(format!(
                    "pick needs [N,C] with N={} indices, got {:?}",
                    idx.len(),
                    t.shape()
                )));
            }
            let c = t.shape()[1];
            let mut out = Vec::with_capacity(idx.len());
            for (i, &j) in idx.iter().enumerate() {
                if j >= c {
                    return Err(Error::shape(format!("pick index {j} out of range for {c} columns")));
                }
                out.push(t.data()[i * c + j]);
            }
            Tensor::vector(out)
        };
        Ok(self.push(value, Op::Pick(a, idx.to_vec()), self.any_grad(&[a])))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (outer, n, inner) = split_axis(t.shape(), axis)?;
            let mut out = t.data().to_vec();
            for_each_lane(outer, n, inner, |idx| {
                let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in idx.clone() {
                    out[i] = (out[i] - max).exp();
                    total += out[i];
                }
                for i in idx {
                    out[i] /= total;
                }
            });
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Softmax(a, axis), self.any_grad(&[a])))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (outer, n, inner) = split_axis(t.shape(), axis)?;
            let mut out = t.data().to_vec();
            for_each_lane(outer, n, inner, |idx| {
                let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + idx.clone().map(|i| (out[i] - max).exp()).sum::<f64>().ln();
                for i in idx {
                    out[i] -= lse;
                }
            });
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::LogSoftmax(a, axis), self.any_grad(&[a])))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let t = self.value(a);
            let width = *t.shape().last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
            if width == 0 {
                return Err(Error::shape("layer_norm over a zero-length axis"));
            }
            let rows = t.numel() / width;
            let mut xhat = vec![0.0; t.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let x = &t.data()[r * width..(r + 1) * width];
                let mean = x.iter().sum::<f64>() / width as f64;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for (o, v) in xhat[r * width..(r + 1) * width].iter_mut().zip(x) {
                    *o = (v - mean) * is;
                }
            }
            (Tensor::new(t.shape().to_vec(), xhat.clone())?, xhat, inv_std)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: a,
                xhat,
                inv_std,
            },
            self.any_grad(&[a]),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let value = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), self.any_grad(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a), self.any_grad(&[a]))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), self.any_grad(&[a]))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if t.numel() == 0 {
                return Err(Error::shape("mean of an empty tensor"));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        };
        Ok(self.push(value, Op::Mean(a), self.any_grad(&[a])))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let (outer, n, inner) = split_axis(t.shape(), axis)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += t.data()[(o * n + j) * inner + i];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::SumAxis(a, axis), self.any_grad(&[a])))
    }

    /// Replaces entries where `mask` is true by `fill`; those entries get no gradient.
    pub fn masked_fill(&self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if mask.len() != t.numel() {
                return Err(Error::shape(format!(
                    "mask of length {} for tensor of {} elements",
                    mask.len(),
                    t.numel()
                )));
            }
            let out = t
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { fill } else { x })
                .collect();
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::MaskedFill(a, mask.to_vec()), self.any_grad(&[a])))
    }

    /// Scales every lane of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let (value, norms) = {
            let t = self.value(a);
            let width = *t.shape().last().ok_or_else(|| Error::shape("l2_normalize on a scalar"))?;
            let rows = t.numel() / width.max(1);
            let mut out = t.data().to_vec();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let lane = &mut out[r * width..(r + 1) * width];
                let norm = lane.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid("cannot normalize a zero vector"));
                }
                lane.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (Tensor::new(t.shape().to_vec(), out)?, norms)
        };
        Ok(self.push(value, Op::L2Normalize { input: a, norms }, self.any_grad(&[a])))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (value, probs) = {
            let t = self.value(logits);
            if t.rank() != 2 || t.shape()[0] != targets.len() || targets.is_empty() {
                return Err(Error::shape(format!(
                    "cross_entropy needs [N,C] logits with N={} targets, got {:?}",
                    targets.len(),
                    t.shape()
                )));
            }
            let c = t.shape()[1];
            let mut probs = t.data().to_vec();
            let mut loss = 0.0;
            for (r, &target) in targets.iter().enumerate() {
                if target >= c {
                    return Err(Error::shape(format!("target {target} out of range for {c} classes")));
                }
                let lane = &mut probs[r * c..(r + 1) * c];
                let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = lane.iter().map(|v| (v - max).exp()).sum();
                loss -= lane[target] - max - total.ln();
                lane.iter_mut().for_each(|v| *v = (*v - max).exp() / total);
            }
            (Tensor::scalar(loss / targets.len() as f64), probs)
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            self.any_grad(&[logits]),
        ))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Populates gradients of every trainable leaf with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves keep gradients.
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn check_suffix(a: &[usize], b: &[usize], name: &str) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(format!("{name}: {a:?} and {b:?} are not compatible")));
    }
    Ok(())
}

fn for_each_lane(outer: usize, n: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose_kernel(data: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = data[base + i * n + j];
            }
        }
    }
    out
}

/// `g · bᵀ` for g [m,n], b [k,n] -> [m,k]
fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for a [m,k], g [m,n] -> [k,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += x * y;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot => *slot = Some(delta),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce() -> Vec<f64>) {
    if nodes[v.0].requires_grad {
        accumulate(grads, nodes, v, f());
    }
}

/// Reduces a gradient of the broadcast shape back onto the suffix-shaped operand.
fn reduce_suffix(g: &[f64], nb: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; nb];
    for (i, gi) in g.iter().enumerate() {
        out[i % nb] += gi * f(i);
    }
    out
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let k = *ta.shape().last().unwrap();
            let n = tb.shape()[1];
            let m = ta.numel() / k;
            accumulate_with(grads, nodes, *a, || matmul_nt(g, tb.data(), m, k, n));
            accumulate_with(grads, nodes, *b, || matmul_tn(ta.data(), g, m, k, n));
        }
        Op::Bmm(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let n = tb.shape()[2];
            accumulate_with(grads, nodes, *a, || {
                (0..batch)
                    .flat_map(|bi| {
                        matmul_nt(&g[bi * m * n..(bi + 1) * m * n], &tb.data()[bi * k * n..(bi + 1) * k * n], m, k, n)
                    })
                    .collect()
            });
            accumulate_with(grads, nodes, *b, || {
                (0..batch)
                    .flat_map(|bi| {
                        matmul_tn(&ta.data()[bi * m * k..(bi + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], m, k, n)
                    })
                    .collect()
            });
        }
        Op::Add(a, b) => {
            accumulate_with(grads, nodes, *a, || g.to_vec());
            accumulate_with(grads, nodes, *b, || reduce_suffix(g, val(*b).numel(), |_| 1.0));
        }
        Op::Sub(a, b) => {
            accumulate_with(grads, nodes, *a, || g.to_vec());
            accumulate_with(grads, nodes, *b, || reduce_suffix(g, val(*b).numel(), |_| -1.0));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let nb = tb.numel();
            accumulate_with(grads, nodes, *a, || {
                g.iter().enumerate().map(|(i, gi)| gi * tb.data()[i % nb]).collect()
            });
            accumulate_with(grads, nodes, *b, || reduce_suffix(g, nb, |i| ta.data()[i]));
        }
        Op::Scale(a, c) => accumulate_with(grads, nodes, *a, || g.iter().map(|x| x * c).collect()),
        Op::Transpose(a) => {
            let s = out.shape();
            let r = s.len();
            let (m, n) = (s[r - 2], s[r - 1]);
            let batch = out.numel() / (m * n).max(1);
            accumulate_with(grads, nodes, *a, || transpose_kernel(g, batch, m, n));
        }
        Op::Reshape(a) => accumulate_with(grads, nodes, *a, || g.to_vec()),
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis).expect("valid axis");
            let mut offset = 0;
            for p in parts {
                let len = val(*p).shape()[*axis];
                accumulate_with(grads, nodes, *p, || {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    d
                });
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let src = val(*input);
            let (outer, n, inner) = split_axis(src.shape(), *axis).expect("valid axis");
            let len = out.shape()[*axis];
            accumulate_with(grads, nodes, *input, || {
                let mut d = vec![0.0; src.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                d
            });
        }
        Op::SelectRows(a, rows) => {
            let src = val(*a);
            let width = src.numel() / src.shape()[0].max(1);
            accumulate_with(grads, nodes, *a, || {
                let mut d = vec![0.0; src.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for (x, y) in d[r * width..(r + 1) * width].iter_mut().zip(&g[i * width..(i + 1) * width]) {
                        *x += y;
                    }
                }
                d
            });
        }
        Op::Pick(a, idx) => {
            let src = val(*a);
            let c = src.shape()[1];
            accumulate_with(grads, nodes, *a, || {
                let mut d = vec![0.0; src.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] += g[i];
                }
                d
            });
        }
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = split_axis(out.shape(), *axis).expect("valid axis");
            accumulate_with(grads, nodes, *a, || {
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for_each_lane(outer, n, inner, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                    for i in idx {
                        d[i] = y[i] * (g[i] - dot);
                    }
                });
                d
            });
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, n, inner) = split_axis(out.shape(), *axis).expect("valid axis");
            accumulate_with(grads, nodes, *a, || {
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for_each_lane(outer, n, inner, |idx| {
                    let total: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        d[i] = g[i] - y[i].exp() * total;
                    }
                });
                d
            });
        }
        Op::LayerNorm { input, xhat, inv_std } => {
            let width = *out.shape().last().unwrap();
            accumulate_with(grads, nodes, *input, || {
                let mut d = vec![0.0; xhat.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / width as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for ((o, gi), xi) in d[span].iter_mut().zip(gr).zip(xr) {
                        *o = is * (gi - mean_g - xi * mean_gx);
                    }
                }
                d
            });
        }
        Op::Gelu(a) => {
            let x = val(*a);
            accumulate_with(grads, nodes, *a, || {
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect()
            });
        }
        Op::Tanh(a) => accumulate_with(grads, nodes, *a, || {
            out.data().iter().zip(g).map(|(y, gi)| gi * (1.0 - y * y)).collect()
        }),
        Op::Sum(a) => accumulate_with(grads, nodes, *a, || vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate_with(grads, nodes, *a, || vec![g[0] / n as f64; n]);
        }
        Op::SumAxis(a, axis) => {
            let src = val(*a);
            let (outer, n, inner) = split_axis(src.shape(), *axis).expect("valid axis");
            accumulate_with(grads, nodes, *a, || {
                let mut d = vec![0.0; src.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            d[(o * n + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                d
            });
        }
        Op::MaskedFill(a, mask) => accumulate_with(grads, nodes, *a, || {
            g.iter().zip(mask).map(|(gi, &m)| if m { 0.0 } else { *gi }).collect()
        }),
        Op::L2Normalize { input, norms } => {
            let width = *out.shape().last().unwrap();
            accumulate_with(grads, nodes, *input, || {
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        d[i] = (g[i] - y[i] * dot) / norm;
                    }
                }
                d
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).shape()[1];
            let scale = g[0] / targets.len() as f64;
            accumulate_with(grads, nodes, *logits, || {
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                d
            });
        }
    }
}
