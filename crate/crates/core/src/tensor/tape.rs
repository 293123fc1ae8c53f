//! Tape-based reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. [`Var::backward`] walks the tape in reverse and returns the
//! gradient of a scalar with respect to every recorded node.

use std::cell::RefCell;

use thiserror::Error;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::params::{ParamId, ParamStore};
use crate::Scalar;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{0}")]
    BadArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, T, T),
    Softmax { x: usize, cols: usize },
    LogSoftmax { x: usize, cols: usize },
    Sum(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Narrow { x: usize, outer: usize, in_chunk: usize, offset: usize, out_chunk: usize },
    GatherRows { x: usize, idx: Vec<usize>, row: usize },
    ScatterRows { x: usize, dst: Vec<usize>, weights: Option<Vec<T>>, row: usize },
    PickPerRow { x: usize, idx: Vec<usize>, cols: usize },
    Conv2d { x: usize, k: usize, bias: Option<usize>, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<usize> },
    Upsample { x: usize, geom: PoolGeom },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, geom: [usize; 3], xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, geom: [usize; 3], xhat: Vec<T>, inv_std: Vec<T> },
    BceLogits { x: usize, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation graph; one tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, shape, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn check_len(value: &[T], shape: &[usize]) -> Result<()> {
        if value.len() != numel(shape) {
            return Err(TensorError::BadArgument(format!(
                "{} values for shape {:?}",
                value.len(),
                shape
            )));
        }
        Ok(())
    }

    /// A differentiable input.
    pub fn var(&self, value: Vec<T>, shape: &[usize]) -> Result<Var<'_, T>> {
        Self::check_len(&value, shape)?;
        Ok(self.push(value, shape.to_vec(), Op::Leaf, true))
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Vec<T>, shape: &[usize]) -> Result<Var<'_, T>> {
        Self::check_len(&value, shape)?;
        Ok(self.push(value, shape.to_vec(), Op::Leaf, false))
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.push(vec![value], vec![], Op::Leaf, false)
    }

    /// Snapshot of a stored parameter; its gradient is routed back to the
    /// store by [`Gradients::accumulate_into`].
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = store.get(id);
        self.push(p.value.clone(), p.shape.clone(), Op::Param(id), p.trainable)
    }

    fn unary(&self, x: usize, f: impl Fn(T) -> T, op: Op<T>) -> Var<'_, T> {
        let (value, shape, ng) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x];
            (n.value.iter().map(|&v| f(v)).collect(), n.shape.clone(), n.needs_grad)
        };
        self.push(value, shape, op, ng)
    }

    fn binary(&self, op_name: &'static str, a: usize, b: usize, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'_, T>> {
        let (value, shape, ng) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a], &nodes[b]);
            if na.shape != nb.shape {
                return Err(TensorError::ShapeMismatch { op: op_name, lhs: na.shape.clone(), rhs: nb.shape.clone() });
            }
            let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            (v, na.shape.clone(), na.needs_grad || nb.needs_grad)
        };
        Ok(self.push(value, shape, op, ng))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let (value, shape, chunks, outer, ng) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| TensorError::BadArgument("concat of nothing".into()))?;
            let base = &nodes[first.id].shape;
            if axis >= base.len() {
                return Err(TensorError::BadArgument(format!("concat axis {axis} for shape {base:?}")));
            }
            let outer = numel(&base[..axis]);
            let mut axis_len = 0;
            let mut chunks = Vec::with_capacity(parts.len());
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                    return Err(TensorError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.clone() });
                }
                axis_len += s[axis];
                chunks.push(numel(&s[axis..]));
            }
            let mut shape = base.clone();
            shape[axis] = axis_len;
            let mut value = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for (p, &c) in parts.iter().zip(&chunks) {
                    value.extend_from_slice(&nodes[p.id].value[o * c..(o + 1) * c]);
                }
            }
            let ng = parts.iter().any(|p| nodes[p.id].needs_grad);
            (value, shape, chunks, outer, ng)
        };
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(self.push(value, shape, Op::Concat { inputs, outer, chunks }, ng))
    }

    pub fn value_of(&self, id: usize) -> Vec<T> {
        self.nodes.borrow()[id].value.clone()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.value_of(self.id)
    }

    pub fn scalar_value(&self) -> T {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary("add", self.id, other.id, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary("sub", self.id, other.id, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary("mul", self.id, other.id, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`n` vector to every row of an `[.., n]` tensor.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, shape, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (x, r) = (&nodes[self.id], &nodes[row.id]);
            let n = r.value.len();
            if r.shape.len() != 1 || x.shape.last() != Some(&n) {
                return Err(TensorError::ShapeMismatch { op: "add_row", lhs: x.shape.clone(), rhs: r.shape.clone() });
            }
            let mut v = x.value.clone();
            for chunk in v.chunks_mut(n) {
                for (a, &b) in chunk.iter_mut().zip(&r.value) {
                    *a += b;
                }
            }
            (v, x.shape.clone(), x.needs_grad || r.needs_grad)
        };
        Ok(self.tape.push(value, shape, Op::AddRow(self.id, row.id), ng))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, |v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, |v| v + c, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape.unary(self.id, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self.id, kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(self.id, T::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t, T> {
        self.tape.unary(self.id, T::ln, Op::Log(self.id))
    }

    /// Gradient flows only where the input lies inside `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.tape.unary(self.id, |v| v.max(lo).min(hi), Op::Clamp(self.id, lo, hi))
    }

    fn last_dim(&self) -> Result<usize> {
        self.shape()
            .last()
            .copied()
            .filter(|&c| c > 0)
            .ok_or_else(|| TensorError::BadArgument("softmax needs a non-empty last axis".into()))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let cols = self.last_dim()?;
        let (value, shape, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let mut v = x.value.clone();
            v.chunks_mut(cols).for_each(kernels::softmax_in_place);
            (v, x.shape.clone(), x.needs_grad)
        };
        Ok(self.tape.push(value, shape, Op::Softmax { x: self.id, cols }, ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let cols = self.last_dim()?;
        let (value, shape, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let mut v = x.value.clone();
            v.chunks_mut(cols).for_each(kernels::log_softmax_in_place);
            (v, x.shape.clone(), x.needs_grad)
        };
        Ok(self.tape.push(value, shape, Op::LogSoftmax { x: self.id, cols }, ng))
    }

    pub fn sum(self) -> Var<'t, T> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            (x.value.iter().copied().sum::<T>(), x.needs_grad)
        };
        self.tape.push(vec![value], vec![], Op::Sum(self.id), ng)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = numel(&self.shape()).max(1);
        self.sum().scale(T::one() / T::from_usize_lossy(n))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if numel(&x.shape) != numel(shape) {
                return Err(TensorError::ShapeMismatch { op: "reshape", lhs: x.shape.clone(), rhs: shape.to_vec() });
            }
            (x.value.clone(), x.needs_grad)
        };
        Ok(self.tape.push(value, shape.to_vec(), Op::Reshape(self.id), ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (value, shape, outer, in_chunk, offset, out_chunk, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if axis >= x.shape.len() || start + len > x.shape[axis] {
                return Err(TensorError::BadArgument(format!(
                    "narrow({axis}, {start}, {len}) on shape {:?}",
                    x.shape
                )));
            }
            let outer = numel(&x.shape[..axis]);
            let inner = numel(&x.shape[axis + 1..]);
            let in_chunk = x.shape[axis] * inner;
            let (offset, out_chunk) = (start * inner, len * inner);
            let mut value = Vec::with_capacity(outer * out_chunk);
            for o in 0..outer {
                let base = o * in_chunk + offset;
                value.extend_from_slice(&x.value[base..base + out_chunk]);
            }
            let mut shape = x.shape.clone();
            shape[axis] = len;
            (value, shape, outer, in_chunk, offset, out_chunk, x.needs_grad)
        };
        Ok(self.tape.push(value, shape, Op::Narrow { x: self.id, outer, in_chunk, offset, out_chunk }, ng))
    }

    /// `[m, n] x [n, p] -> [m, p]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, m, k, n, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![T::zero(); m * n];
            kernels::matmul(&a.value, &b.value, &mut out, m, k, n);
            (out, m, k, n, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(value, vec![m, n], Op::MatMul { a: self.id, b: other.id, m, k, n }, ng))
    }

    /// `x W + b` with `W` shaped `[in, out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    /// Rows of `self` selected by `idx` (also serves as embedding lookup).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let (value, shape, row, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let rows = *x.shape.first().ok_or_else(|| TensorError::BadArgument("gather on a scalar".into()))?;
            let row = numel(&x.shape[1..]);
            let mut value = Vec::with_capacity(idx.len() * row);
            for &i in idx {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: rows });
                }
                value.extend_from_slice(&x.value[i * row..(i + 1) * row]);
            }
            let mut shape = x.shape.clone();
            shape[0] = idx.len();
            (value, shape, row, x.needs_grad)
        };
        Ok(self.tape.push(value, shape, Op::GatherRows { x: self.id, idx: idx.to_vec(), row }, ng))
    }

    /// Sums (optionally weighted) rows into `out_rows` buckets: row `r` is
    /// added to output row `dst[r]`.
    pub fn scatter_rows(self, dst: &[usize], weights: Option<&[T]>, out_rows: usize) -> Result<Var<'t, T>> {
        let (value, shape, row, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let rows = *x.shape.first().ok_or_else(|| TensorError::BadArgument("scatter on a scalar".into()))?;
            if dst.len() != rows || weights.is_some_and(|w| w.len() != rows) {
                return Err(TensorError::BadArgument(format!("scatter of {rows} rows with {} targets", dst.len())));
            }
            let row = numel(&x.shape[1..]);
            let mut value = vec![T::zero(); out_rows * row];
            for (r, &d) in dst.iter().enumerate() {
                if d >= out_rows {
                    return Err(TensorError::IndexOutOfRange { op: "scatter_rows", index: d, len: out_rows });
                }
                let w = weights.map_or(T::one(), |w| w[r]);
                let src = &x.value[r * row..(r + 1) * row];
                for (o, &s) in value[d * row..(d + 1) * row].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
            let mut shape = x.shape.clone();
            shape[0] = out_rows;
            (value, shape, row, x.needs_grad)
        };
        let op = Op::ScatterRows { x: self.id, dst: dst.to_vec(), weights: weights.map(<[T]>::to_vec), row };
        Ok(self.tape.push(value, shape, op, ng))
    }

    /// `out[r] = self[r, idx[r]]` for a `[m, n]` tensor.
    pub fn pick_per_row(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let (value, cols, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 2 || x.shape[0] != idx.len() {
                return Err(TensorError::ShapeMismatch { op: "pick_per_row", lhs: x.shape.clone(), rhs: vec![idx.len()] });
            }
            let cols = x.shape[1];
            let mut value = Vec::with_capacity(idx.len());
            for (r, &c) in idx.iter().enumerate() {
                if c >= cols {
                    return Err(TensorError::IndexOutOfRange { op: "pick_per_row", index: c, len: cols });
                }
                value.push(x.value[r * cols + c]);
            }
            (value, cols, x.needs_grad)
        };
        let n = idx.len();
        Ok(self.tape.push(value, vec![n], Op::PickPerRow { x: self.id, idx: idx.to_vec(), cols }, ng))
    }

    /// 2-D convolution of `[B, C, H, W]` with a `[O, C, KH, KW]` kernel.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (value, shape, geom, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (x, k) = (&nodes[self.id], &nodes[kernel.id]);
            let geom = ConvGeom::new(&x.shape, &k.shape, stride, pad)?;
            if let Some(b) = bias {
                if nodes[b.id].shape != [geom.out_ch] {
                    return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: k.shape.clone(), rhs: nodes[b.id].shape.clone() });
                }
            }
            let bias_value = bias.map(|b| nodes[b.id].value.as_slice());
            let value = kernels::conv2d_forward(&geom, &x.value, &k.value, bias_value);
            let ng = x.needs_grad || k.needs_grad || bias.is_some_and(|b| nodes[b.id].needs_grad);
            (value, geom.out_shape(), geom, ng)
        };
        let op = Op::Conv2d { x: self.id, k: kernel.id, bias: bias.map(|b| b.id), geom };
        Ok(self.tape.push(value, shape.to_vec(), op, ng))
    }

    /// Non-overlapping max pooling with a square `window` on `[B, C, H, W]`.
    pub fn maxpool2d(self, window: usize) -> Result<Var<'t, T>> {
        let (value, argmax, shape, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let geom = PoolGeom::pool(&x.shape, window)?;
            let (value, argmax) = kernels::maxpool_forward(&geom, &x.value);
            (value, argmax, geom.out_shape(), x.needs_grad)
        };
        Ok(self.tape.push(value, shape.to_vec(), Op::MaxPool { x: self.id, argmax }, ng))
    }

    /// Nearest-neighbour upsampling by `factor` on `[B, C, H, W]`.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, T>> {
        let (value, geom, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let geom = PoolGeom::upsample(&x.shape, factor)?;
            (kernels::upsample_forward(&geom, &x.value), geom, x.needs_grad)
        };
        Ok(self.tape.push(value, geom.out_shape().to_vec(), Op::Upsample { x: self.id, geom }, ng))
    }

    /// Batch normalization over axis 1 (`[N, C]` or `[N, C, H, W]`) using
    /// the statistics of this batch.
    pub fn batch_norm_train(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let (value, shape, geom, xhat, inv_std, stats, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let geom = bn_geom(&x.shape, &nodes[gamma.id].shape, &nodes[beta.id].shape)?;
            let (mean, var) = kernels::channel_moments(&x.value, geom);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let (value, xhat) = kernels::bn_apply(&x.value, geom, &mean, &inv_std, &nodes[gamma.id].value, &nodes[beta.id].value);
            let ng = x.needs_grad || nodes[gamma.id].needs_grad || nodes[beta.id].needs_grad;
            let count = geom[0] * geom[2];
            (value, x.shape.clone(), geom, xhat, inv_std, BatchStats { mean, var, count }, ng)
        };
        let op = Op::BatchNormTrain { x: self.id, gamma: gamma.id, beta: beta.id, geom, xhat, inv_std };
        Ok((self.tape.push(value, shape, op, ng), stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(self, gamma: Var<'t, T>, beta: Var<'t, T>, mean: &[T], var: &[T], eps: T) -> Result<Var<'t, T>> {
        let (value, shape, geom, xhat, inv_std, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let geom = bn_geom(&x.shape, &nodes[gamma.id].shape, &nodes[beta.id].shape)?;
            if mean.len() != geom[1] || var.len() != geom[1] {
                return Err(TensorError::BadArgument("running statistics do not match channels".into()));
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let (value, xhat) = kernels::bn_apply(&x.value, geom, mean, &inv_std, &nodes[gamma.id].value, &nodes[beta.id].value);
            let ng = x.needs_grad || nodes[gamma.id].needs_grad || nodes[beta.id].needs_grad;
            (value, x.shape.clone(), geom, xhat, inv_std, ng)
        };
        let op = Op::BatchNormEval { x: self.id, gamma: gamma.id, beta: beta.id, geom, xhat, inv_std };
        Ok(self.tape.push(value, shape, op, ng))
    }

    /// Elementwise binary cross-entropy between `sigmoid(self)` and a fixed
    /// 0/1 target, computed stably from logits.
    pub fn bce_with_logits(self, target: &[T]) -> Result<Var<'t, T>> {
        let (value, shape, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.value.len() != target.len() {
                return Err(TensorError::ShapeMismatch { op: "bce_with_logits", lhs: x.shape.clone(), rhs: vec![target.len()] });
            }
            let v = x.value.iter().zip(target).map(|(&l, &t)| kernels::bce_logit(l, t)).collect();
            (v, x.shape.clone(), x.needs_grad)
        };
        Ok(self.tape.push(value, shape, Op::BceLogits { x: self.id, target: target.to_vec() }, ng))
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 || !root.shape.iter().all(|&d| d == 1) {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(vec![T::one()]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, params: nodes.iter().map(|n| match n.op { Op::Param(p) => Some(p), _ => None }).collect() })
    }
}

fn bn_geom(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<[usize; 3]> {
    if x.len() < 2 || gamma != [x[1]] || beta != [x[1]] {
        return Err(TensorError::ShapeMismatch { op: "batch_norm", lhs: x.to_vec(), rhs: gamma.to_vec() });
    }
    Ok([x[0], x[1], numel(&x[2..])])
}

/// Gradient of the scalar a backward pass started from.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(p)) = (g, p) {
                store.accumulate_grad(*p, g);
            }
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            add_into(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            add_into(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            add_into(grads, nodes, *a, |d| {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(vb) {
                    *d += g * v;
                }
            });
            add_into(grads, nodes, *b, |d| {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(va) {
                    *d += g * v;
                }
            });
        }
        Op::AddRow(x, r) => {
            add_into(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            add_into(grads, nodes, *r, |d| {
                let n = d.len();
                for chunk in g.chunks(n) {
                    for (d, &g) in d.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
            });
        }
        Op::Scale(x, c) => add_into(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)),
        Op::AddScalar(x) | Op::Reshape(x) => {
            add_into(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g))
        }
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            add_into(grads, nodes, *a, |d| kernels::matmul_grad_lhs(g, vb, d, *m, *k, *n));
            add_into(grads, nodes, *b, |d| kernels::matmul_grad_rhs(va, g, d, *m, *k, *n));
        }
        Op::Relu(x) => add_into(grads, nodes, *x, |d| {
            for ((d, &g), &v) in d.iter_mut().zip(g).zip(y) {
                if v > T::zero() {
                    *d += g;
                }
            }
        }),
        Op::Sigmoid(x) => add_into(grads, nodes, *x, |d| {
            for ((d, &g), &s) in d.iter_mut().zip(g).zip(y) {
                *d += g * s * (T::one() - s);
            }
        }),
        Op::Exp(x) => add_into(grads, nodes, *x, |d| {
            for ((d, &g), &e) in d.iter_mut().zip(g).zip(y) {
                *d += g * e;
            }
        }),
        Op::Log(x) => {
            let vx = &nodes[*x].value;
            add_into(grads, nodes, *x, |d| {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                    *d += g / v;
                }
            })
        }
        Op::Clamp(x, lo, hi) => {
            let vx = &nodes[*x].value;
            add_into(grads, nodes, *x, |d| {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                    if v >= *lo && v <= *hi {
                        *d += g;
                    }
                }
            })
        }
        Op::Softmax { x, cols } => add_into(grads, nodes, *x, |d| {
            for ((d, g), y) in d.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += y * (g - dot);
                }
            }
        }),
        Op::LogSoftmax { x, cols } => add_into(grads, nodes, *x, |d| {
            for ((d, g), y) in d.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                let total: T = g.iter().copied().sum();
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += g - y.exp() * total;
                }
            }
        }),
        Op::Sum(x) => add_into(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Concat { inputs, outer, chunks } => {
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&input, &c) in inputs.iter().zip(chunks) {
                add_into(grads, nodes, input, |d| {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + c];
                        for (d, &s) in d[o * c..(o + 1) * c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += c;
            }
        }
        Op::Narrow { x, outer, in_chunk, offset, out_chunk } => add_into(grads, nodes, *x, |d| {
            for o in 0..*outer {
                let dst = &mut d[o * in_chunk + offset..o * in_chunk + offset + out_chunk];
                for (d, &s) in dst.iter_mut().zip(&g[o * out_chunk..(o + 1) * out_chunk]) {
                    *d += s;
                }
            }
        }),
        Op::GatherRows { x, idx, row } => add_into(grads, nodes, *x, |d| {
            for (r, &i) in idx.iter().enumerate() {
                for (d, &s) in d[i * row..(i + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                    *d += s;
                }
            }
        }),
        Op::ScatterRows { x, dst, weights, row } => add_into(grads, nodes, *x, |d| {
            for (r, &t) in dst.iter().enumerate() {
                let w = weights.as_ref().map_or(T::one(), |w| w[r]);
                for (d, &s) in d[r * row..(r + 1) * row].iter_mut().zip(&g[t * row..(t + 1) * row]) {
                    *d += w * s;
                }
            }
        }),
        Op::PickPerRow { x, idx, cols } => add_into(grads, nodes, *x, |d| {
            for (r, &c) in idx.iter().enumerate() {
                d[r * cols + c] += g[r];
            }
        }),
        Op::Conv2d { x, k, bias, geom } => {
            let (vx, vk) = (&nodes[*x].value, &nodes[*k].value);
            add_into(grads, nodes, *x, |d| kernels::conv2d_grad_input(geom, g, vk, d));
            add_into(grads, nodes, *k, |d| kernels::conv2d_grad_kernel(geom, g, vx, d));
            if let Some(b) = bias {
                add_into(grads, nodes, *b, |d| kernels::conv2d_grad_bias(geom, g, d));
            }
        }
        Op::MaxPool { x, argmax } => add_into(grads, nodes, *x, |d| {
            for (&src, &g) in argmax.iter().zip(g) {
                d[src] += g;
            }
        }),
        Op::Upsample { x, geom } => add_into(grads, nodes, *x, |d| kernels::upsample_backward(geom, g, d)),
        Op::BatchNormTrain { x, gamma, beta, geom, xhat, inv_std } => {
            let vg = &nodes[*gamma].value;
            let (sum_g, sum_gx) = kernels::bn_sums(g, xhat, *geom);
            add_into(grads, nodes, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s));
            add_into(grads, nodes, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s));
            add_into(grads, nodes, *x, |d| kernels::bn_train_grad_input(g, xhat, *geom, vg, inv_std, &sum_g, &sum_gx, d));
        }
        Op::BatchNormEval { x, gamma, beta, geom, xhat, inv_std } => {
            let vg = &nodes[*gamma].value;
            let (sum_g, sum_gx) = kernels::bn_sums(g, xhat, *geom);
            add_into(grads, nodes, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s));
            add_into(grads, nodes, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s));
            add_into(grads, nodes, *x, |d| {
                let [outer, c, inner] = *geom;
                for o in 0..outer {
                    for ch in 0..c {
                        let scale = vg[ch] * inv_std[ch];
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            d[i] += g[i] * scale;
                        }
                    }
                }
            });
        }
        Op::BceLogits { x, target } => {
            let vx = &nodes[*x].value;
            add_into(grads, nodes, *x, |d| {
                for (((d, &g), &l), &t) in d.iter_mut().zip(g).zip(vx).zip(target) {
                    *d += g * (kernels::sigmoid(l) - t);
                }
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_reports_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        let b = tape.var(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = a.add(b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "add", lhs: vec![2], rhs: vec![3] });
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::<f64>::new();
        let a = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(a.backward(), Err(TensorError::NotScalar(_))));
        assert!(a.sum().backward().is_ok());
    }

    #[test]
    fn linear_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.var(vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0], &[2, 3]).unwrap();
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let w = tape.constant(eye, &[3, 3]).unwrap();
        let b = tape.constant(vec![0.0; 3], &[3]).unwrap();
        assert_eq!(x.linear(w, Some(b)).unwrap().value(), x.value());
    }

    #[test]
    fn linear_weight_gradient_is_input_broadcast() {
        // loss = sum(x W) with x fixed: dL/dW[i, j] = x[i]
        let tape = Tape::<f64>::new();
        let x = tape.constant(vec![2.0, -1.0, 0.5], &[1, 3]).unwrap();
        let w = tape.var(vec![0.3; 6], &[3, 2]).unwrap();
        let g = x.matmul(w).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 2.0, -1.0, -1.0, 0.5, 0.5]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let w = tape.var(vec![0.0], &[1]).unwrap();
        let g = w.sigmoid().scale(3.0).sum().backward().unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.75]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.var(vec![0.0; 4], &[4]).unwrap();
        assert_eq!(x.softmax().unwrap().value(), vec![0.25; 4]);
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = tape.var(data.clone(), &[2, 1, 3, 4]).unwrap();
        let k = tape.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(x.conv2d(k, None, 1, 0).unwrap().value(), data);
    }

    #[test]
    fn gradients_accumulate_on_reuse() {
        let tape = Tape::<f64>::new();
        let x = tape.var(vec![3.0], &[1]).unwrap();
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = y.sum().backward().unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }
}
