//! Computation tape and the differentiable primitives recorded on it.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{NdError, Result};
use crate::kernels::{gemm, MatRef};
use crate::tensor::{axis_split, Tensor};

/// Guard used by `l2_normalize` and by callers that need a floor on a
/// denominator or a log argument.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MatMulMode {
    /// `[.., m, k] · [k, n]`: leading dims of the left operand fold into rows.
    Flat,
    /// `[B.., m, k] · [B.., k, n]` with identical leading dims.
    Batched,
    /// `[m, k] · [B.., k, n]`: one left matrix shared across the batch.
    SharedLeft,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, mode: MatMulMode },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Scale { x: usize, c: f64 },
    Shift(usize),
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Max { x: usize, axis: usize, argmax: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Expand(usize),
    Softmax { x: usize, axis: usize },
    L2Normalize { x: usize, axis: usize, norms: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } => {
                vec![*a, *b]
            }
            Neg(x) | Exp(x) | Log(x) | Relu(x) | Tanh(x) | Shift(x) | SumAll(x) | MeanAll(x)
            | Reshape(x) | Transpose(x) | Expand(x) => vec![*x],
            Clamp { x, .. }
            | Scale { x, .. }
            | Sum { x, .. }
            | Mean { x, .. }
            | Max { x, .. }
            | Slice { x, .. }
            | Softmax { x, .. }
            | L2Normalize { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// One tape per forward/backward pass. Nodes are stored in creation order,
/// which is a topological order of the computation graph.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(NdError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rank = values[0].ndim();
        if axis >= rank {
            return Err(NdError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let reference = values[0].shape().to_vec();
        let mut out_shape = reference.clone();
        out_shape[axis] = 0;
        for v in &values {
            let ok = v.ndim() == rank
                && v.shape()
                    .iter()
                    .zip(&reference)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(NdError::ShapeMismatch {
                    op: "concat",
                    lhs: reference.clone(),
                    rhs: v.shape().to_vec(),
                });
            }
            out_shape[axis] += v.shape()[axis];
        }
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for v in &values {
            let d = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * d * inner..(o + 1) * d * inner];
                let dst = o * total * inner + offset * inner;
                data[dst..dst + d * inner].copy_from_slice(src);
            }
            offset += d;
        }
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(self.record(Tensor::new(out_shape, data)?, Op::Concat { inputs, axis }))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let expanded = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, 0)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(NdError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

/// Output shape of an elementwise binary op. Only equal shapes, scalars and
/// leading-batch (suffix) broadcasting are accepted.
pub(crate) fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb || b.numel() == 1 && a.numel() >= 1 {
        Ok(sa.to_vec())
    } else if a.numel() == 1 {
        Ok(sb.to_vec())
    } else if sa.ends_with(sb) {
        Ok(sa.to_vec())
    } else if sb.ends_with(sa) {
        Ok(sb.to_vec())
    } else {
        Err(NdError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.node(self.id).value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.node(self.id).value.data()[0]
    }

    /// Stop-gradient: a constant node sharing this node's value.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.push_rc(value, Op::Leaf, false)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.record(out, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, &a, &b)?;
        let n: usize = shape.iter().product();
        let (na, nb) = (a.numel(), b.numel());
        let data = (0..n)
            .map(|i| f(a.data()[i % na], b.data()[i % nb]))
            .collect();
        Ok(self.tape.record(Tensor::new(shape, data)?, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add { a: self.id, b: other.id }, |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub { a: self.id, b: other.id }, |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul { a: self.id, b: other.id }, |x, y| x * y)
    }

    /// Elementwise division; any zero in the denominator is an error.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let b = other.value();
        if let Some(index) = b.data().iter().position(|&x| x == 0.0) {
            return Err(NdError::DivideByZero { index });
        }
        self.binary(other, "div", Op::Div { a: self.id, b: other.id }, |x, y| x / y)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; non-positive inputs are an error.
    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(index) = v.data().iter().position(|&x| x <= 0.0 || x.is_nan()) {
            return Err(NdError::LogDomain {
                index,
                value: v.data()[index],
            });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale { x: self.id, c }, |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |x| x + c)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.numel() as f64;
        self.tape.record(Tensor::scalar(m), Op::MeanAll(self.id))
    }

    fn reduce(&self, name: &'static str, axis: usize) -> Result<(Rc<Tensor>, Vec<usize>, (usize, usize, usize))> {
        let v = self.value();
        check_axis(name, axis, v.ndim())?;
        let split = axis_split(v.shape(), axis);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Ok((v, shape, split))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        let (v, shape, (outer, d, inner)) = self.reduce("sum", axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let row = &v.data()[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (acc, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        Ok(self.tape.record(Tensor::new(shape, data)?, Op::Sum { x: self.id, axis }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let (v, shape, (outer, d, inner)) = self.reduce("mean", axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let row = &v.data()[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (acc, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let scale = 1.0 / d as f64;
        data.iter_mut().for_each(|x| *x *= scale);
        Ok(self.tape.record(Tensor::new(shape, data)?, Op::Mean { x: self.id, axis }))
    }

    /// Max over `axis`, removing it. Gradient flows to the first maximizer.
    pub fn max(&self, axis: usize) -> Result<Var<'t>> {
        let (v, shape, (outer, d, inner)) = self.reduce("max", axis)?;
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                for i in 0..inner {
                    let x = v.data()[(o * d + j) * inner + i];
                    let slot = o * inner + i;
                    if x > data[slot] {
                        data[slot] = x;
                        argmax[slot] = j;
                    }
                }
            }
        }
        Ok(self.tape.record(
            Tensor::new(shape, data)?,
            Op::Max {
                x: self.id,
                axis,
                argmax,
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_axis("softmax", axis, v.ndim())?;
        let (outer, d, inner) = axis_split(v.shape(), axis);
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * d + j) * inner + i;
                let m = (0..d).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..d {
                    let e = (data[idx(j)] - m).exp();
                    data[idx(j)] = e;
                    z += e;
                }
                for j in 0..d {
                    data[idx(j)] /= z;
                }
            }
        }
        Ok(self.tape.record(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::Softmax { x: self.id, axis },
        ))
    }

    /// `x / max(‖x‖₂, EPS)` along `axis`.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_axis("l2_normalize", axis, v.ndim())?;
        let (outer, d, inner) = axis_split(v.shape(), axis);
        let mut data = v.data().to_vec();
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * d + j) * inner + i;
                let n = (0..d).map(|j| data[idx(j)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = n;
                let denom = n.max(EPS);
                for j in 0..d {
                    data[idx(j)] /= denom;
                }
            }
        }
        Ok(self.tape.record(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::L2Normalize {
                x: self.id,
                axis,
                norms,
            },
        ))
    }

    /// Cosine similarity along the last axis; output drops that axis.
    pub fn cosine_sim(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sa != sb {
            return Err(NdError::ShapeMismatch {
                op: "cosine_sim",
                lhs: sa,
                rhs: sb,
            });
        }
        let axis = sa.len() - 1;
        let a = self.l2_normalize(axis)?;
        let b = other.l2_normalize(axis)?;
        a.mul(b)?.sum(axis)
    }

    /// Matrix product. Accepts `[.., m, k]·[k, n]`, `[B.., m, k]·[B.., k, n]`
    /// and `[m, k]·[B.., k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || NdError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (mode, out_shape) = if sb.len() == 2 {
            let mut s = sa.to_vec();
            *s.last_mut().unwrap() = n;
            (MatMulMode::Flat, s)
        } else if sa.len() == 2 {
            let mut s = sb.to_vec();
            let r = s.len();
            s[r - 2] = m;
            (MatMulMode::SharedLeft, s)
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            let mut s = sa.to_vec();
            *s.last_mut().unwrap() = n;
            (MatMulMode::Batched, s)
        } else {
            return Err(mismatch());
        };
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        match mode {
            MatMulMode::Flat => {
                let rows: usize = sa[..sa.len() - 1].iter().product();
                gemm(
                    MatRef::new(a.data(), rows, k),
                    MatRef::new(b.data(), k, n),
                    &mut data,
                    false,
                );
            }
            MatMulMode::Batched | MatMulMode::SharedLeft => {
                let batch = numel / (m * n).max(1);
                for bi in 0..batch {
                    let a_off = if mode == MatMulMode::SharedLeft { 0 } else { bi * m * k };
                    gemm(
                        MatRef::new(&a.data()[a_off..a_off + m * k], m, k),
                        MatRef::new(&b.data()[bi * k * n..(bi + 1) * k * n], k, n),
                        &mut data[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
        }
        Ok(self.tape.record(
            Tensor::new(out_shape, data)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                mode,
            },
        ))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_axis("slice", axis, v.ndim())?;
        let (outer, d, inner) = axis_split(v.shape(), axis);
        if start >= end || end > d {
            return Err(NdError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} invalid for extent {d}"),
            });
        }
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[(o * d + start) * inner..(o * d + end) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.record(
            Tensor::new(shape, data)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let v = self.value();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.tape.record(out, Op::Reshape(self.id)))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        let r = v.ndim();
        if r < 2 {
            return Err(NdError::InvalidArgument {
                op: "transpose",
                reason: format!("rank {r} < 2"),
            });
        }
        let out = transpose_last2(&v);
        Ok(self.tape.record(out, Op::Transpose(self.id)))
    }

    /// Broadcast size-1 axes up to `shape` (same rank).
    pub fn expand(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let v = self.value();
        let ok = v.ndim() == shape.len()
            && v.shape().iter().zip(&shape).all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(NdError::ShapeMismatch {
                op: "expand",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let n: usize = shape.iter().product();
        let map = expand_index_map(v.shape(), &shape);
        let data = (0..n).map(|i| v.data()[map(i)]).collect();
        Ok(self.tape.record(Tensor::new(shape, data)?, Op::Expand(self.id)))
    }
}

pub(crate) fn transpose_last2(v: &Tensor) -> Tensor {
    let r = v.ndim();
    let (m, n) = (v.shape()[r - 2], v.shape()[r - 1]);
    let batch = v.numel() / (m * n).max(1);
    let mut data = vec![0.0; v.numel()];
    for b in 0..batch {
        let src = &v.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = v.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data).expect("transpose preserves numel")
}

/// Map a flat index in the expanded shape to the source flat index.
pub(crate) fn expand_index_map(src: &[usize], dst: &[usize]) -> impl Fn(usize) -> usize {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let dst = dst.to_vec();
    move |mut i| {
        let mut off = 0;
        for d in (0..rank).rev() {
            let idx = i % dst[d];
            i /= dst[d];
            off += idx * src_strides[d];
        }
        off
    }
}
