//! Reverse-mode autodiff over a tape of executed operations.
//!
//! A [`Tape`] records every op in execution order; [`Var`] is a cheap handle
//! (tape reference + node index) to one recorded tensor. `backward` walks the
//! tape once in exact reverse order, accumulating gradients additively, so a
//! value used by several consumers receives the sum of their contributions.
//!
//! Tensors on the tape are immutable once computed. A tape is confined to one
//! thread (`Rc` makes this structural); parallelism belongs across tapes, not
//! inside one.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, split_axis, strides_of, Tensor};

// ── Handles and nodes ───────────────────────────────────────────────────────

pub struct Tape<S: Elem> {
    inner: Rc<RefCell<Vec<Node<S>>>>,
}

impl<S: Elem> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Elem> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor recorded on a tape.
pub struct Var<S: Elem> {
    tape: Tape<S>,
    id: usize,
}

impl<S: Elem> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<S: Elem> std::fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.tape
            .with_nodes(|n| write!(f, "Var(id {}, shape {:?})", self.id, n[self.id].value.shape()))
    }
}

struct Node<S: Elem> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    /// True when this node is a gradient sink (a `requires_grad` leaf) or any
    /// of its ancestors is; gates all gradient work during backward.
    needs_grad: bool,
    op: Op<S>,
}

/// Neighbour-row gather plan: `out[b, m, k, :] = x[b, idx[b, m, k], :]`.
#[derive(Debug)]
pub struct GatherIndex {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    /// Number of source rows per batch item; every index is `< n`.
    pub n: usize,
    pub idx: Vec<usize>,
}

impl GatherIndex {
    pub fn new(batch: usize, rows: usize, cols: usize, n: usize, idx: Vec<usize>) -> Result<Self> {
        if idx.len() != batch * rows * cols {
            return Err(Error::shape(
                "gather",
                format!(
                    "index count {} != batch {} * rows {} * cols {}",
                    idx.len(),
                    batch,
                    rows,
                    cols
                ),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {n} source rows"),
            ));
        }
        Ok(GatherIndex {
            batch,
            rows,
            cols,
            n,
            idx,
        })
    }
}

#[derive(Clone)]
enum Op<S: Elem> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: S },
    Matmul { a: usize, b: usize },
    Relu { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    MaxReduce { a: usize, winners: Rc<Vec<usize>> },
    SumAll { a: usize },
    MeanReduce { a: usize, axis: Option<usize> },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    NllMean { logp: usize, targets: Rc<Vec<usize>> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: S },
    ConvGrouped { x: usize, w: usize, bias: Option<usize>, stride: usize, padding: usize, groups: usize },
    Dropout { a: usize, mask: Rc<Vec<S>> },
    GatherRows { a: usize, index: Rc<GatherIndex> },
    RepeatAxis { a: usize, axis: usize, times: usize },
    EdgeGather { a: usize, index: Rc<GatherIndex>, concat: bool },
}

impl<S: Elem> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Relu { .. } => "relu",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::MaxReduce { .. } => "max_reduce",
            Op::SumAll { .. } => "sum",
            Op::MeanReduce { .. } => "mean_reduce",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::NllMean { .. } => "nll",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConvGrouped { .. } => "conv_grouped",
            Op::Dropout { .. } => "dropout",
            Op::GatherRows { .. } => "gather",
            Op::RepeatAxis { .. } => "repeat_axis",
            Op::EdgeGather { .. } => "edge_gather",
        }
    }
}

// ── Tape construction ───────────────────────────────────────────────────────

impl<S: Elem> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<S> {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.leaf(value, false)
    }

    fn push_unchecked(&self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var<S> {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Records a computed node. With debug assertions enabled, a non-finite
    /// result from an op is reported as an error at the op that produced it.
    fn push(&self, value: Tensor<S>, parents: &[usize], op: Op<S>) -> Result<Var<S>> {
        if cfg!(debug_assertions) && !value.is_all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = {
            let nodes = self.inner.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        Ok(self.push_unchecked(value, needs_grad, op))
    }

    fn with_nodes<R>(&self, f: impl FnOnce(&Vec<Node<S>>) -> R) -> R {
        f(&self.inner.borrow())
    }
}

/// Concatenates along `axis`. All parts must share every other extent.
pub fn concat<S: Elem>(parts: &[Var<S>], axis: usize) -> Result<Var<S>> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no tensors to concatenate"));
    }
    let tape = parts[0].tape.clone();
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    let out = tape.with_nodes(|nodes| -> Result<Tensor<S>> {
        let shapes: Vec<&[usize]> = ids.iter().map(|&i| nodes[i].value.shape()).collect();
        let first = shapes[0];
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        for s in &shapes[1..] {
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {first:?} and {s:?} along axis {axis}"),
                ));
            }
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = vec![S::zero(); out_shape.iter().product()];
        let out_row = out_shape[axis] * inner;
        let mut offset = 0;
        for &id in &ids {
            let t = &nodes[id].value;
            let len = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_base = o * out_row + offset * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        Tensor::new(out_shape, data)
    })?;
    tape.push(out, &ids, Op::Concat { parts: ids.clone(), axis })
}

// ── Var: accessors ──────────────────────────────────────────────────────────

impl<S: Elem> Var<S> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_nodes(|n| n[self.id].value.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_nodes(|n| n[self.id].value.numel())
    }

    /// Clones the value out of the tape.
    pub fn value(&self) -> Tensor<S> {
        self.tape.with_nodes(|n| n[self.id].value.clone())
    }

    /// Reads the value in place without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        self.tape.with_nodes(|n| f(&n[self.id].value))
    }

    /// Gradient accumulated by the latest `backward`, if any reached this
    /// node. Intermediate nodes release their gradient once it has been
    /// propagated; leaves keep theirs.
    pub fn grad(&self) -> Option<Tensor<S>> {
        self.tape.with_nodes(|n| {
            n[self.id]
                .grad
                .as_ref()
                .map(|g| Tensor::new(n[self.id].value.shape().to_vec(), g.clone()).expect("grad shape"))
        })
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }
}

// ── Var: ops ────────────────────────────────────────────────────────────────

impl<S: Elem> Var<S> {
    pub fn add(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &self,
        other: &Var<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: impl Fn(usize, usize) -> Op<S>,
    ) -> Result<Var<S>> {
        debug_assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars from different tapes"
        );
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            } else {
                let out_shape = broadcast_shapes(a.shape(), b.shape()).map_err(|_| {
                    Error::shape(
                        name,
                        format!("cannot broadcast {:?} against {:?}", a.shape(), b.shape()),
                    )
                })?;
                let sa = broadcast_strides(&out_shape, a.shape());
                let sb = broadcast_strides(&out_shape, b.shape());
                let mut data = Vec::with_capacity(out_shape.iter().product());
                let ad = a.data();
                let bd = b.data();
                for_each_mapped2(&out_shape, &sa, &sb, |ai, bi| data.push(f(ad[ai], bd[bi])));
                Tensor::new(out_shape, data)
            }
        })?;
        self.tape.push(out, &[self.id, other.id], op(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Result<Var<S>> {
        let c = S::from_f64(factor);
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * c).collect())
        })?;
        self.tape.push(out, &[self.id], Op::Scale { a: self.id, factor: c })
    }

    pub fn relu(&self) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect(),
            )
        })?;
        self.tape.push(out, &[self.id], Op::Relu { a: self.id })
    }

    /// Batched matrix product. The trailing two axes multiply as matrices;
    /// leading axes broadcast.
    pub fn matmul(&self, other: &Var<S>) -> Result<Var<S>> {
        debug_assert!(Rc::ptr_eq(&self.tape.inner, &other.tape.inner));
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            matmul_forward(a, b)
        })?;
        self.tape.push(out, &[self.id, other.id], Op::Matmul { a: self.id, b: other.id })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            let ndim = a.ndim();
            let mut seen = vec![false; ndim];
            if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape(
                    "permute",
                    format!("{perm:?} is not a permutation of {ndim} axes"),
                ));
            }
            Ok(permute_apply(a, perm))
        })?;
        self.tape.push(out, &[self.id], Op::Permute { a: self.id, perm: perm.to_vec() })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            if shape.iter().product::<usize>() != a.numel() {
                return Err(Error::shape(
                    "reshape",
                    format!("cannot reshape {:?} to {:?}", a.shape(), shape),
                ));
            }
            Tensor::new(shape.to_vec(), a.data().to_vec())
        })?;
        self.tape.push(out, &[self.id], Op::Reshape { a: self.id })
    }

    /// Maximum along `axis` (the axis is removed). Ties resolve to the lowest
    /// index along the axis.
    pub fn max_reduce(&self, axis: usize) -> Result<Var<S>> {
        let (out, winners) = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            if axis >= a.ndim() {
                return Err(Error::shape(
                    "max_reduce",
                    format!("axis {axis} out of range for shape {:?}", a.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(a.shape(), axis);
            if len == 0 {
                return Err(Error::shape("max_reduce", "cannot reduce an empty axis"));
            }
            let mut out_shape = a.shape().to_vec();
            out_shape.remove(axis);
            let d = a.data();
            let mut data = Vec::with_capacity(outer * inner);
            let mut winners = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut best = d[base];
                    let mut best_at = base;
                    for j in 1..len {
                        let v = d[base + j * inner];
                        if v > best {
                            best = v;
                            best_at = base + j * inner;
                        }
                    }
                    data.push(best);
                    winners.push(best_at);
                }
            }
            Ok((Tensor::new(out_shape, data)?, winners))
        })?;
        self.tape.push(
            out,
            &[self.id],
            Op::MaxReduce { a: self.id, winners: Rc::new(winners) },
        )
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&self) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            let mut acc = S::zero();
            for &v in a.data() {
                acc = acc + v;
            }
            Tensor::scalar(acc)
        });
        self.tape.push(out, &[self.id], Op::SumAll { a: self.id })
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&self) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            let mut acc = S::zero();
            for &v in a.data() {
                acc = acc + v;
            }
            Tensor::scalar(acc / S::from_f64(a.numel() as f64))
        });
        self.tape.push(out, &[self.id], Op::MeanReduce { a: self.id, axis: None })
    }

    /// Mean along `axis` (the axis is removed).
    pub fn mean_reduce(&self, axis: usize) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            if axis >= a.ndim() {
                return Err(Error::shape(
                    "mean_reduce",
                    format!("axis {axis} out of range for shape {:?}", a.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(a.shape(), axis);
            if len == 0 {
                return Err(Error::shape("mean_reduce", "cannot reduce an empty axis"));
            }
            let inv = S::from_f64(1.0 / len as f64);
            let mut out_shape = a.shape().to_vec();
            out_shape.remove(axis);
            let d = a.data();
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut acc = S::zero();
                    for j in 0..len {
                        acc = acc + d[base + j * inner];
                    }
                    data.push(acc * inv);
                }
            }
            Tensor::new(out_shape, data)
        })?;
        self.tape.push(out, &[self.id], Op::MeanReduce { a: self.id, axis: Some(axis) })
    }

    /// Numerically stable softmax along `axis`: the row maximum is subtracted
    /// before exponentiation.
    pub fn softmax(&self, axis: usize) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            softmax_forward(&nodes[self.id].value, axis, false)
        })?;
        self.tape.push(out, &[self.id], Op::Softmax { a: self.id, axis })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            softmax_forward(&nodes[self.id].value, axis, true)
        })?;
        self.tape.push(out, &[self.id], Op::LogSoftmax { a: self.id, axis })
    }

    /// Mean negative log-likelihood of `targets` under 2-d log-probabilities
    /// `[rows, classes]`.
    pub fn nll_mean(&self, targets: &[usize]) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let lp = &nodes[self.id].value;
            if lp.ndim() != 2 {
                return Err(Error::shape(
                    "nll",
                    format!("log-probabilities must be 2-d, got {:?}", lp.shape()),
                ));
            }
            let (rows, classes) = (lp.shape()[0], lp.shape()[1]);
            if targets.len() != rows {
                return Err(Error::shape(
                    "nll",
                    format!("{} targets for {} rows", targets.len(), rows),
                ));
            }
            if let Some(bad) = targets.iter().find(|&&t| t >= classes) {
                return Err(Error::shape(
                    "nll",
                    format!("target class {bad} out of range for {classes} classes"),
                ));
            }
            let d = lp.data();
            let mut acc = S::zero();
            for (r, &t) in targets.iter().enumerate() {
                acc = acc - d[r * classes + t];
            }
            Ok(Tensor::scalar(acc / S::from_f64(rows as f64)))
        })?;
        self.tape.push(
            out,
            &[self.id],
            Op::NllMean { logp: self.id, targets: Rc::new(targets.to_vec()) },
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    /// `gamma` and `beta` must both have the shape `[last_extent]`.
    pub fn layer_norm(&self, gamma: &Var<S>, beta: &Var<S>, eps: f64) -> Result<Var<S>> {
        if eps <= 0.0 {
            return Err(Error::shape("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let eps = S::from_f64(eps);
        let out = self.tape.with_nodes(|nodes| {
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let e = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "input must have at least one axis"))?;
            if g.shape() != [e] || b.shape() != [e] {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "gamma {:?} / beta {:?} must both be [{e}] for input {:?}",
                        g.shape(),
                        b.shape(),
                        x.shape()
                    ),
                ));
            }
            let mut data = vec![S::zero(); x.numel()];
            let xd = x.data();
            let gd = g.data();
            let bd = b.data();
            let rows = x.numel() / e;
            let inv_e = S::from_f64(1.0 / e as f64);
            for r in 0..rows {
                let row = &xd[r * e..(r + 1) * e];
                let mut mean = S::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean * inv_e;
                let mut var = S::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_e;
                let inv_std = S::one() / (var + eps).sqrt();
                for j in 0..e {
                    data[r * e + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        })?;
        self.tape.push(
            out,
            &[self.id, gamma.id, beta.id],
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
        )
    }

    /// Grouped 1-d cross-correlation over `[batch, channels, length]`.
    ///
    /// Weights are `[c_out, c_in / groups, kernel]`; both channel counts must
    /// divide evenly by `groups`. Output length is
    /// `(length + 2 * padding - kernel) / stride + 1`.
    pub fn conv_grouped(
        &self,
        weight: &Var<S>,
        bias: Option<&Var<S>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let x = &nodes[self.id].value;
            let w = &nodes[weight.id].value;
            let b = bias.map(|b| &nodes[b.id].value);
            conv_grouped_forward(x, w, b, stride, padding, groups)
        })?;
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        self.tape.push(
            out,
            &parents,
            Op::ConvGrouped {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
                groups,
            },
        )
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`, so the expectation is the
    /// identity. `rate == 0` is the identity op.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<Var<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let inv_keep = S::from_f64(1.0 / keep);
        let numel = self.numel();
        let mask: Vec<S> = (0..numel)
            .map(|_| if rng.random::<f64>() < keep { inv_keep } else { S::zero() })
            .collect();
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
            )
        })?;
        self.tape.push(out, &[self.id], Op::Dropout { a: self.id, mask: Rc::new(mask) })
    }

    /// Gathers full feature rows: input `[batch, n, f]` with an index plan
    /// `[batch, rows, cols]` yields `[batch, rows, cols, f]`.
    pub fn gather_rows(&self, index: Rc<GatherIndex>) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let x = &nodes[self.id].value;
            if x.ndim() != 3 || x.shape()[0] != index.batch || x.shape()[1] != index.n {
                return Err(Error::shape(
                    "gather",
                    format!(
                        "input {:?} does not match index plan [batch {}, n {}]",
                        x.shape(),
                        index.batch,
                        index.n
                    ),
                ));
            }
            let f = x.shape()[2];
            let xd = x.data();
            let mut data = Vec::with_capacity(index.idx.len() * f);
            for (pos, &src_row) in index.idx.iter().enumerate() {
                let b = pos / (index.rows * index.cols);
                let base = (b * index.n + src_row) * f;
                data.extend_from_slice(&xd[base..base + f]);
            }
            Tensor::new(vec![index.batch, index.rows, index.cols, f], data)
        })?;
        self.tape.push(out, &[self.id], Op::GatherRows { a: self.id, index })
    }

    /// Assembles neighbourhood edge channels in one pass: input `[b, c, n]`
    /// with a `[b, n, k]` index plan yields `[b, c', n, k]` where the delta
    /// channels hold `x[neighbour] - x[centre]` and, with `concat`, the first
    /// `c` channels repeat the centre features (`c' = 2c`, else `c' = c`).
    /// Equivalent to gather/subtract/concat but without the intermediates.
    pub fn edge_gather(&self, index: Rc<GatherIndex>, concat: bool) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let x = &nodes[self.id].value;
            if x.ndim() != 3 || x.shape()[0] != index.batch || x.shape()[2] != index.n {
                return Err(Error::shape(
                    "edge_gather",
                    format!(
                        "input {:?} does not match index plan [batch {}, n {}]",
                        x.shape(),
                        index.batch,
                        index.n
                    ),
                ));
            }
            if index.rows != index.n {
                return Err(Error::shape(
                    "edge_gather",
                    format!("index plan has {} rows for {} points", index.rows, index.n),
                ));
            }
            let (b, c, n, k) = (x.shape()[0], x.shape()[1], x.shape()[2], index.cols);
            let c_out = if concat { 2 * c } else { c };
            let xd = x.data();
            let mut data = vec![S::zero(); b * c_out * n * k];
            for bi in 0..b {
                let plan = &index.idx[bi * n * k..(bi + 1) * n * k];
                for ch in 0..c {
                    let xrow = &xd[(bi * c + ch) * n..(bi * c + ch + 1) * n];
                    let delta_ch = if concat { c + ch } else { ch };
                    if concat {
                        let centre =
                            &mut data[((bi * c_out + ch) * n) * k..((bi * c_out + ch + 1) * n) * k];
                        for (i, &xv) in xrow.iter().enumerate() {
                            for slot in &mut centre[i * k..(i + 1) * k] {
                                *slot = xv;
                            }
                        }
                    }
                    let delta = &mut data
                        [((bi * c_out + delta_ch) * n) * k..((bi * c_out + delta_ch + 1) * n) * k];
                    for (i, &xv) in xrow.iter().enumerate() {
                        for (slot, &j) in delta[i * k..(i + 1) * k].iter_mut().zip(&plan[i * k..]) {
                            *slot = xrow[j] - xv;
                        }
                    }
                }
            }
            Tensor::new(vec![b, c_out, n, k], data)
        })?;
        self.tape.push(out, &[self.id], Op::EdgeGather { a: self.id, index, concat })
    }

    /// Repeats a length-1 axis `times` times.
    pub fn repeat_axis(&self, axis: usize, times: usize) -> Result<Var<S>> {
        let out = self.tape.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            if axis >= a.ndim() || a.shape()[axis] != 1 {
                return Err(Error::shape(
                    "repeat_axis",
                    format!("axis {axis} of {:?} must exist and have extent 1", a.shape()),
                ));
            }
            if times == 0 {
                return Err(Error::shape("repeat_axis", "cannot repeat zero times"));
            }
            let (outer, _, inner) = split_axis(a.shape(), axis);
            let mut out_shape = a.shape().to_vec();
            out_shape[axis] = times;
            let d = a.data();
            let mut data = Vec::with_capacity(outer * times * inner);
            for o in 0..outer {
                let block = &d[o * inner..(o + 1) * inner];
                for _ in 0..times {
                    data.extend_from_slice(block);
                }
            }
            Tensor::new(out_shape, data)
        })?;
        self.tape.push(out, &[self.id], Op::RepeatAxis { a: self.id, axis, times })
    }
}

// ── Backward ────────────────────────────────────────────────────────────────

impl<S: Elem> Var<S> {
    /// Runs reverse-mode accumulation from this scalar. Errors unless the
    /// value has exactly one element. After the walk every `requires_grad`
    /// leaf reachable from this node holds its gradient.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.tape.inner.borrow_mut();
        let numel = nodes[self.id].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarBackward { numel });
        }
        if !nodes[self.id].needs_grad {
            return Ok(()); // nothing reachable wants gradients
        }
        accumulate(&mut nodes, self.id, vec![S::one()]);
        for i in (0..=self.id).rev() {
            let Some(gout) = nodes[i].grad.take() else {
                continue;
            };
            let op = nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                nodes[i].grad = Some(gout); // leaves keep their gradient
                continue;
            }
            apply_backward(&mut nodes, i, &op, gout);
        }
        Ok(())
    }
}

fn accumulate<S: Elem>(nodes: &mut [Node<S>], id: usize, contrib: Vec<S>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut nodes[id].grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi = *gi + ci;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn zeros_like<S: Elem>(nodes: &[Node<S>], id: usize) -> Vec<S> {
    vec![S::zero(); nodes[id].value.numel()]
}

fn apply_backward<S: Elem>(nodes: &mut [Node<S>], out_id: usize, op: &Op<S>, gout: Vec<S>) {
    match op {
        Op::Leaf => unreachable!("leaf handled by caller"),
        Op::Add { a, b } | Op::Sub { a, b } => {
            let negate_b = matches!(op, Op::Sub { .. });
            let out_shape = nodes[out_id].value.shape().to_vec();
            for (p, negate) in [(*a, false), (*b, negate_b)] {
                if !nodes[p].needs_grad {
                    continue;
                }
                let mut gp = zeros_like(nodes, p);
                let sp = broadcast_strides(&out_shape, nodes[p].value.shape());
                let mut oi = 0;
                for_each_mapped1(&out_shape, &sp, |pi| {
                    let c = if negate { S::zero() - gout[oi] } else { gout[oi] };
                    gp[pi] = gp[pi] + c;
                    oi += 1;
                });
                accumulate(nodes, p, gp);
            }
        }
        Op::Mul { a, b } => {
            let out_shape = nodes[out_id].value.shape().to_vec();
            for (p, q) in [(*a, *b), (*b, *a)] {
                if !nodes[p].needs_grad {
                    continue;
                }
                let mut gp = zeros_like(nodes, p);
                {
                    let sp = broadcast_strides(&out_shape, nodes[p].value.shape());
                    let sq = broadcast_strides(&out_shape, nodes[q].value.shape());
                    let qd = nodes[q].value.data();
                    let mut oi = 0;
                    for_each_mapped2(&out_shape, &sp, &sq, |pi, qi| {
                        gp[pi] = gp[pi] + gout[oi] * qd[qi];
                        oi += 1;
                    });
                }
                accumulate(nodes, p, gp);
            }
        }
        Op::Scale { a, factor } => {
            if nodes[*a].needs_grad {
                let gp: Vec<S> = gout.iter().map(|&g| g * *factor).collect();
                accumulate(nodes, *a, gp);
            }
        }
        Op::Matmul { a, b } => {
            let (ga, gb) = matmul_backward(
                &nodes[*a].value,
                &nodes[*b].value,
                nodes[out_id].value.shape(),
                &gout,
                nodes[*a].needs_grad,
                nodes[*b].needs_grad,
            );
            if let Some(ga) = ga {
                accumulate(nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(nodes, *b, gb);
            }
        }
        Op::Relu { a } => {
            if nodes[*a].needs_grad {
                let ad = nodes[*a].value.data();
                let gp: Vec<S> = gout
                    .iter()
                    .zip(ad)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                accumulate(nodes, *a, gp);
            }
        }
        Op::Permute { a, perm } => {
            if nodes[*a].needs_grad {
                let mut gp = zeros_like(nodes, *a);
                let in_shape = nodes[*a].value.shape();
                let out_shape = nodes[out_id].value.shape();
                let in_strides = strides_of(in_shape);
                let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut oi = 0;
                odometer(out_shape, &step, |in_flat| {
                    gp[in_flat] = gp[in_flat] + gout[oi];
                    oi += 1;
                });
                accumulate(nodes, *a, gp);
            }
        }
        Op::Reshape { a } => {
            if nodes[*a].needs_grad {
                accumulate(nodes, *a, gout);
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[out_id].value.shape().to_vec();
            let (outer, out_len, inner) = split_axis(&out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].needs_grad {
                    let mut gp = zeros_like(nodes, p);
                    for o in 0..outer {
                        let src = (o * out_len + offset) * inner;
                        let dst = o * len * inner;
                        gp[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                    }
                    accumulate(nodes, p, gp);
                }
                offset += len;
            }
        }
        Op::MaxReduce { a, winners, .. } => {
            if nodes[*a].needs_grad {
                let mut gp = zeros_like(nodes, *a);
                for (oi, &w) in winners.iter().enumerate() {
                    gp[w] = gp[w] + gout[oi];
                }
                accumulate(nodes, *a, gp);
            }
        }
        Op::SumAll { a } => {
            if nodes[*a].needs_grad {
                let g = gout[0];
                accumulate(nodes, *a, vec![g; nodes[*a].value.numel()]);
            }
        }
        Op::MeanReduce { a, axis } => {
            if nodes[*a].needs_grad {
                match axis {
                    None => {
                        let g = gout[0] * S::from_f64(1.0 / nodes[*a].value.numel() as f64);
                        accumulate(nodes, *a, vec![g; nodes[*a].value.numel()]);
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_axis(nodes[*a].value.shape(), *axis);
                        let inv = S::from_f64(1.0 / len as f64);
                        let mut gp = zeros_like(nodes, *a);
                        for o in 0..outer {
                            for i in 0..inner {
                                let g = gout[o * inner + i] * inv;
                                let base = o * len * inner + i;
                                for j in 0..len {
                                    gp[base + j * inner] = gp[base + j * inner] + g;
                                }
                            }
                        }
                        accumulate(nodes, *a, gp);
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            if nodes[*a].needs_grad {
                let s = nodes[out_id].value.data();
                let (outer, len, inner) = split_axis(nodes[out_id].value.shape(), *axis);
                let mut gp = zeros_like(nodes, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            let at = base + j * inner;
                            dot = dot + gout[at] * s[at];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            gp[at] = s[at] * (gout[at] - dot);
                        }
                    }
                }
                accumulate(nodes, *a, gp);
            }
        }
        Op::LogSoftmax { a, axis } => {
            if nodes[*a].needs_grad {
                let lp = nodes[out_id].value.data();
                let (outer, len, inner) = split_axis(nodes[out_id].value.shape(), *axis);
                let mut gp = zeros_like(nodes, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut gsum = S::zero();
                        for j in 0..len {
                            gsum = gsum + gout[base + j * inner];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            gp[at] = gout[at] - lp[at].exp() * gsum;
                        }
                    }
                }
                accumulate(nodes, *a, gp);
            }
        }
        Op::NllMean { logp, targets } => {
            if nodes[*logp].needs_grad {
                let classes = nodes[*logp].value.shape()[1];
                let rows = targets.len();
                let g = gout[0] * S::from_f64(1.0 / rows as f64);
                let mut gp = zeros_like(nodes, *logp);
                for (r, &t) in targets.iter().enumerate() {
                    gp[r * classes + t] = S::zero() - g;
                }
                accumulate(nodes, *logp, gp);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (gx, gg, gb) = layer_norm_backward(
                &nodes[*x].value,
                &nodes[*gamma].value,
                *eps,
                &gout,
                nodes[*x].needs_grad,
                nodes[*gamma].needs_grad,
                nodes[*beta].needs_grad,
            );
            if let Some(gx) = gx {
                accumulate(nodes, *x, gx);
            }
            if let Some(gg) = gg {
                accumulate(nodes, *gamma, gg);
            }
            if let Some(gb) = gb {
                accumulate(nodes, *beta, gb);
            }
        }
        Op::ConvGrouped { x, w, bias, stride, padding, groups } => {
            let (gx, gw, gb) = conv_grouped_backward(
                &nodes[*x].value,
                &nodes[*w].value,
                *stride,
                *padding,
                *groups,
                &gout,
                nodes[*x].needs_grad,
                nodes[*w].needs_grad,
                bias.map(|b| nodes[b].needs_grad).unwrap_or(false),
            );
            if let Some(gx) = gx {
                accumulate(nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(nodes, *w, gw);
            }
            if let (Some(gb), Some(b)) = (gb, bias) {
                accumulate(nodes, *b, gb);
            }
        }
        Op::Dropout { a, mask } => {
            if nodes[*a].needs_grad {
                let gp: Vec<S> = gout.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect();
                accumulate(nodes, *a, gp);
            }
        }
        Op::GatherRows { a, index } => {
            if nodes[*a].needs_grad {
                let f = nodes[*a].value.shape()[2];
                let mut gp = zeros_like(nodes, *a);
                for (pos, &src_row) in index.idx.iter().enumerate() {
                    let b = pos / (index.rows * index.cols);
                    let dst = (b * index.n + src_row) * f;
                    let src = pos * f;
                    for j in 0..f {
                        gp[dst + j] = gp[dst + j] + gout[src + j];
                    }
                }
                accumulate(nodes, *a, gp);
            }
        }
        Op::RepeatAxis { a, axis, times } => {
            if nodes[*a].needs_grad {
                let (outer, _, inner) = split_axis(nodes[*a].value.shape(), *axis);
                let mut gp = zeros_like(nodes, *a);
                for o in 0..outer {
                    for r in 0..*times {
                        let src = (o * times + r) * inner;
                        for i in 0..inner {
                            gp[o * inner + i] = gp[o * inner + i] + gout[src + i];
                        }
                    }
                }
                accumulate(nodes, *a, gp);
            }
        }
        Op::EdgeGather { a, index, concat } => {
            if nodes[*a].needs_grad {
                let shape = nodes[*a].value.shape();
                let (b, c, n, k) = (shape[0], shape[1], shape[2], index.cols);
                let c_out = if *concat { 2 * c } else { c };
                let mut gp = zeros_like(nodes, *a);
                for bi in 0..b {
                    let plan = &index.idx[bi * n * k..(bi + 1) * n * k];
                    for ch in 0..c {
                        let grow = &mut gp[(bi * c + ch) * n..(bi * c + ch + 1) * n];
                        if *concat {
                            // Centre channels broadcast over k; their grad sums.
                            let gc = &gout[((bi * c_out + ch) * n) * k..((bi * c_out + ch + 1) * n) * k];
                            for (i, slot) in grow.iter_mut().enumerate() {
                                for &gv in &gc[i * k..(i + 1) * k] {
                                    *slot = *slot + gv;
                                }
                            }
                        }
                        let delta_ch = if *concat { c + ch } else { ch };
                        let gd = &gout
                            [((bi * c_out + delta_ch) * n) * k..((bi * c_out + delta_ch + 1) * n) * k];
                        // delta = x[j] - x[i]: +g scatters to the neighbour,
                        // -g accumulates at the centre.
                        for i in 0..n {
                            for (&gv, &j) in gd[i * k..(i + 1) * k].iter().zip(&plan[i * k..]) {
                                grow[i] = grow[i] - gv;
                                grow[j] = grow[j] + gv;
                            }
                        }
                    }
                }
                accumulate(nodes, *a, gp);
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────────

/// Per-out-axis input strides for a broadcast operand (0 on stretched axes).
fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut s = vec![0; out_shape.len()];
    for i in offset..out_shape.len() {
        if in_shape[i - offset] != 1 {
            s[i] = in_strides[i - offset];
        }
    }
    s
}

/// Walks every coordinate of `shape` in row-major order, maintaining a flat
/// offset that advances by `step[axis]` per unit step along each axis.
fn odometer(shape: &[usize], step: &[usize], mut f: impl FnMut(usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let ndim = shape.len();
    let mut coords = vec![0usize; ndim];
    let mut flat = 0usize;
    for _ in 0..numel {
        f(flat);
        for ax in (0..ndim).rev() {
            coords[ax] += 1;
            flat += step[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            flat -= step[ax] * shape[ax];
            coords[ax] = 0;
        }
    }
}

fn for_each_mapped1(out_shape: &[usize], sa: &[usize], mut f: impl FnMut(usize)) {
    odometer(out_shape, sa, |ai| f(ai));
}

fn for_each_mapped2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    // Two odometers advanced in lockstep.
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let ndim = out_shape.len();
    let mut coords = vec![0usize; ndim];
    let (mut fa, mut fb) = (0usize, 0usize);
    for _ in 0..numel {
        f(fa, fb);
        for ax in (0..ndim).rev() {
            coords[ax] += 1;
            fa += sa[ax];
            fb += sb[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            fa -= sa[ax] * out_shape[ax];
            fb -= sb[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
}

fn permute_apply<S: Elem>(a: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
    let in_strides = strides_of(a.shape());
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let d = a.data();
    let mut data = Vec::with_capacity(a.numel());
    odometer(&out_shape, &step, |in_flat| data.push(d[in_flat]));
    Tensor::new(out_shape, data).expect("permute preserves element count")
}

fn matmul_forward<S: Elem>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be at least 2-d, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, ka) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (kb, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let batch = broadcast_shapes(&a.shape()[..a.ndim() - 2], &b.shape()[..b.ndim() - 2])
        .map_err(|_| Error::shape("matmul", format!("batch axes of {:?} and {:?} do not broadcast", a.shape(), b.shape())))?;
    let sa = broadcast_strides(&batch, &a.shape()[..a.ndim() - 2]);
    let sb = broadcast_strides(&batch, &b.shape()[..b.ndim() - 2]);
    let (amat, bmat) = (m * ka, kb * n);
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![S::zero(); out_shape.iter().product()];
    let ad = a.data();
    let bd = b.data();
    let mut ob = 0;
    for_each_mapped2(&batch, &sa, &sb, |ai, bi| {
        let a2 = &ad[ai * amat..ai * amat + amat];
        let b2 = &bd[bi * bmat..bi * bmat + bmat];
        let o2 = &mut out[ob * m * n..(ob + 1) * m * n];
        matmul2d(a2, b2, o2, m, ka, n);
        ob += 1;
    });
    Tensor::new(out_shape, out)
}

/// `out[i, j] += sum_k a[i, k] * b[k, j]`, ikj order so the inner loop
/// streams both `b` and `out` rows.
fn matmul2d<S: Elem>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

#[allow(clippy::type_complexity)]
fn matmul_backward<S: Elem>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    out_shape: &[usize],
    gout: &[S],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let n = out_shape[out_shape.len() - 1];
    let batch = &out_shape[..out_shape.len() - 2];
    let sa = broadcast_strides(batch, &a.shape()[..a.ndim() - 2]);
    let sb = broadcast_strides(batch, &b.shape()[..b.ndim() - 2]);
    let mut ga = need_a.then(|| vec![S::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![S::zero(); b.numel()]);
    let ad = a.data();
    let bd = b.data();
    let (amat, bmat, omat) = (m * k, k * n, m * n);
    let mut ob = 0;
    for_each_mapped2(batch, &sa, &sb, |ai, bi| {
        let g2 = &gout[ob * omat..(ob + 1) * omat];
        if let Some(ga) = ga.as_mut() {
            // dA[i, kk] += sum_j g[i, j] * b[kk, j]
            let b2 = &bd[bi * bmat..bi * bmat + bmat];
            let ga2 = &mut ga[ai * amat..ai * amat + amat];
            for i in 0..m {
                for kk in 0..k {
                    let mut acc = S::zero();
                    let brow = &b2[kk * n..(kk + 1) * n];
                    let grow = &g2[i * n..(i + 1) * n];
                    for j in 0..n {
                        acc = acc + grow[j] * brow[j];
                    }
                    ga2[i * k + kk] = ga2[i * k + kk] + acc;
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            // dB[kk, j] += sum_i a[i, kk] * g[i, j]
            let a2 = &ad[ai * amat..ai * amat + amat];
            let gb2 = &mut gb[bi * bmat..bi * bmat + bmat];
            for i in 0..m {
                let grow = &g2[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = a2[i * k + kk];
                    if av == S::zero() {
                        continue;
                    }
                    let gbrow = &mut gb2[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        gbrow[j] = gbrow[j] + av * grow[j];
                    }
                }
            }
        }
        ob += 1;
    });
    (ga, gb)
}

fn softmax_forward<S: Elem>(x: &Tensor<S>, axis: usize, log: bool) -> Result<Tensor<S>> {
    if axis >= x.ndim() {
        return Err(Error::shape(
            if log { "log_softmax" } else { "softmax" },
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![S::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = d[base];
            for j in 1..len {
                let v = d[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for j in 0..len {
                sum = sum + (d[base + j * inner] - max).exp();
            }
            if log {
                let lse = sum.ln();
                for j in 0..len {
                    let at = base + j * inner;
                    out[at] = d[at] - max - lse;
                }
            } else {
                let inv = S::one() / sum;
                for j in 0..len {
                    let at = base + j * inner;
                    out[at] = (d[at] - max).exp() * inv;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[allow(clippy::type_complexity)]
fn layer_norm_backward<S: Elem>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: S,
    gout: &[S],
    need_x: bool,
    need_gamma: bool,
    need_beta: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let e = *x.shape().last().expect("validated at forward");
    let rows = x.numel() / e;
    let inv_e = S::from_f64(1.0 / e as f64);
    let mut gx = need_x.then(|| vec![S::zero(); x.numel()]);
    let mut gg = need_gamma.then(|| vec![S::zero(); e]);
    let mut gb = need_beta.then(|| vec![S::zero(); e]);
    let xd = x.data();
    let gd = gamma.data();
    let mut xhat = vec![S::zero(); e];
    for r in 0..rows {
        let row = &xd[r * e..(r + 1) * e];
        let grow = &gout[r * e..(r + 1) * e];
        let mut mean = S::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_e;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_e;
        let inv_std = S::one() / (var + eps).sqrt();
        for j in 0..e {
            xhat[j] = (row[j] - mean) * inv_std;
        }
        if let Some(gg) = gg.as_mut() {
            for j in 0..e {
                gg[j] = gg[j] + grow[j] * xhat[j];
            }
        }
        if let Some(gb) = gb.as_mut() {
            for j in 0..e {
                gb[j] = gb[j] + grow[j];
            }
        }
        if let Some(gx) = gx.as_mut() {
            let mut sum1 = S::zero();
            let mut sum2 = S::zero();
            for j in 0..e {
                let dxh = grow[j] * gd[j];
                sum1 = sum1 + dxh;
                sum2 = sum2 + dxh * xhat[j];
            }
            sum1 = sum1 * inv_e;
            sum2 = sum2 * inv_e;
            let gxr = &mut gx[r * e..(r + 1) * e];
            for j in 0..e {
                let dxh = grow[j] * gd[j];
                gxr[j] = inv_std * (dxh - sum1 - xhat[j] * sum2);
            }
        }
    }
    (gx, gg, gb)
}

fn conv_geometry(
    l: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv_grouped", "stride must be at least 1"));
    }
    if kernel == 0 {
        return Err(Error::shape("conv_grouped", "kernel must be at least 1"));
    }
    if l + 2 * padding < kernel {
        return Err(Error::shape(
            "conv_grouped",
            format!("kernel {kernel} does not fit padded length {}", l + 2 * padding),
        ));
    }
    Ok((l + 2 * padding - kernel) / stride + 1)
}

fn conv_grouped_forward<S: Elem>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<S>> {
    if x.ndim() != 3 || w.ndim() != 3 {
        return Err(Error::shape(
            "conv_grouped",
            format!("needs x [b, c, l] and w [c_out, c_in/groups, k], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_in_g, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if groups == 0 || c % groups != 0 || c_out % groups != 0 {
        return Err(Error::shape(
            "conv_grouped",
            format!("groups {groups} must divide channels {c} and output channels {c_out}"),
        ));
    }
    if c_in_g != c / groups {
        return Err(Error::shape(
            "conv_grouped",
            format!("weight expects {c_in_g} channels per group, input provides {}", c / groups),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != [c_out] {
            return Err(Error::shape(
                "conv_grouped",
                format!("bias {:?} must be [{c_out}]", bt.shape()),
            ));
        }
    }
    let l_out = conv_geometry(l, kernel, stride, padding)?;
    let cout_g = c_out / groups;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![S::zero(); b * c_out * l_out];
    // Ungrouped, unpadded convs whose window is the whole signal (or a single
    // sample) reduce to dot products over contiguous slices; they carry almost
    // all of the model's flops, so skip the windowed indexing for them.
    if groups == 1 && padding == 0 && kernel == l && l_out == 1 {
        let span = c * l;
        for bi in 0..b {
            let xrow = &xd[bi * span..(bi + 1) * span];
            let orow = &mut out[bi * c_out..(bi + 1) * c_out];
            for (oc, slot) in orow.iter_mut().enumerate() {
                let wrow = &wd[oc * span..(oc + 1) * span];
                let mut acc = bias.map(|bt| bt.data()[oc]).unwrap_or_else(S::zero);
                for (&xv, &wv) in xrow.iter().zip(wrow) {
                    acc = acc + xv * wv;
                }
                *slot = acc;
            }
        }
        return Tensor::new(vec![b, c_out, l_out], out);
    }
    if groups == 1 && padding == 0 && kernel == 1 && stride == 1 {
        for bi in 0..b {
            let x2 = &xd[bi * c * l..(bi + 1) * c * l];
            let o2 = &mut out[bi * c_out * l..(bi + 1) * c_out * l];
            matmul2d(wd, x2, o2, c_out, c, l);
            if let Some(bt) = bias {
                for (oc, &bv) in bt.data().iter().enumerate() {
                    for slot in &mut o2[oc * l..(oc + 1) * l] {
                        *slot = *slot + bv;
                    }
                }
            }
        }
        return Tensor::new(vec![b, c_out, l_out], out);
    }
    for bi in 0..b {
        for oc in 0..c_out {
            let g = oc / cout_g;
            let base_bias = bias.map(|bt| bt.data()[oc]).unwrap_or_else(S::zero);
            let orow = &mut out[(bi * c_out + oc) * l_out..(bi * c_out + oc + 1) * l_out];
            for (j, slot) in orow.iter_mut().enumerate() {
                let mut acc = base_bias;
                for ic in 0..c_in_g {
                    let xrow = &xd[(bi * c + g * c_in_g + ic) * l..(bi * c + g * c_in_g + ic + 1) * l];
                    let wrow = &wd[(oc * c_in_g + ic) * kernel..(oc * c_in_g + ic + 1) * kernel];
                    for (t, &wv) in wrow.iter().enumerate() {
                        let pos = j * stride + t;
                        if pos >= padding && pos - padding < l {
                            acc = acc + wv * xrow[pos - padding];
                        }
                    }
                }
                *slot = acc;
            }
        }
    }
    Tensor::new(vec![b, c_out, l_out], out)
}

#[allow(clippy::type_complexity, clippy::too_many_arguments)]
fn conv_grouped_backward<S: Elem>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    padding: usize,
    groups: usize,
    gout: &[S],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_in_g, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let cout_g = c_out / groups;
    let l_out = (l + 2 * padding - kernel) / stride + 1;
    let mut gx = need_x.then(|| vec![S::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![S::zero(); w.numel()]);
    let mut gb = need_b.then(|| vec![S::zero(); c_out]);
    let xd = x.data();
    let wd = w.data();
    // Mirror the forward fast paths; see conv_grouped_forward.
    if groups == 1 && padding == 0 && kernel == l && l_out == 1 {
        let span = c * l;
        for bi in 0..b {
            let grow = &gout[bi * c_out..(bi + 1) * c_out];
            for (oc, &gv) in grow.iter().enumerate() {
                if let Some(gb) = gb.as_mut() {
                    gb[oc] = gb[oc] + gv;
                }
                if gv == S::zero() {
                    continue;
                }
                if let Some(gx) = gx.as_mut() {
                    let wrow = &wd[oc * span..(oc + 1) * span];
                    let gxrow = &mut gx[bi * span..(bi + 1) * span];
                    for (slot, &wv) in gxrow.iter_mut().zip(wrow) {
                        *slot = *slot + gv * wv;
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let xrow = &xd[bi * span..(bi + 1) * span];
                    let gwrow = &mut gw[oc * span..(oc + 1) * span];
                    for (slot, &xv) in gwrow.iter_mut().zip(xrow) {
                        *slot = *slot + gv * xv;
                    }
                }
            }
        }
        return (gx, gw, gb);
    }
    if groups == 1 && padding == 0 && kernel == 1 && stride == 1 {
        for bi in 0..b {
            let g2 = &gout[bi * c_out * l..(bi + 1) * c_out * l];
            let x2 = &xd[bi * c * l..(bi + 1) * c * l];
            for oc in 0..c_out {
                let grow = &g2[oc * l..(oc + 1) * l];
                if let Some(gb) = gb.as_mut() {
                    let mut acc = S::zero();
                    for &gv in grow {
                        acc = acc + gv;
                    }
                    gb[oc] = gb[oc] + acc;
                }
                for ic in 0..c {
                    if let Some(gx) = gx.as_mut() {
                        let wv = wd[oc * c + ic];
                        if wv != S::zero() {
                            let gxrow = &mut gx[(bi * c + ic) * l..(bi * c + ic + 1) * l];
                            for (slot, &gv) in gxrow.iter_mut().zip(grow) {
                                *slot = *slot + wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xrow = &x2[ic * l..(ic + 1) * l];
                        let mut acc = S::zero();
                        for (&xv, &gv) in xrow.iter().zip(grow) {
                            acc = acc + xv * gv;
                        }
                        gw[oc * c + ic] = gw[oc * c + ic] + acc;
                    }
                }
            }
        }
        return (gx, gw, gb);
    }
    for bi in 0..b {
        for oc in 0..c_out {
            let g = oc / cout_g;
            let grow = &gout[(bi * c_out + oc) * l_out..(bi * c_out + oc + 1) * l_out];
            if let Some(gb) = gb.as_mut() {
                let mut acc = S::zero();
                for &gv in grow {
                    acc = acc + gv;
                }
                gb[oc] = gb[oc] + acc;
            }
            for ic in 0..c_in_g {
                let xc = bi * c + g * c_in_g + ic;
                let wbase = (oc * c_in_g + ic) * kernel;
                for (j, &gv) in grow.iter().enumerate() {
                    if gv == S::zero() {
                        continue;
                    }
                    for t in 0..kernel {
                        let pos = j * stride + t;
                        if pos >= padding && pos - padding < l {
                            let xat = xc * l + pos - padding;
                            if let Some(gx) = gx.as_mut() {
                                gx[xat] = gx[xat] + wd[wbase + t] * gv;
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wbase + t] = gw[wbase + t] + xd[xat] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ── Tests ───────────────────────────────────────────────────────────────────
