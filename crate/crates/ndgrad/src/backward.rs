//! Reverse sweep over the tape.

use crate::error::{NdError, Result};
use crate::kernels::{gemm, MatRef};
use crate::tape::{expand_index_map, transpose_last2, MatMulMode, Op, Tape, Var, EPS};
use crate::tensor::{axis_split, Tensor};

/// Gradients of one scalar loss with respect to every tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id())
    }

    pub fn by_id(&self, id: usize) -> Tensor {
        match self.grads.get(id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id].clone()),
        }
    }

    /// `None` when no gradient reached the node.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id()).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

/// Reduce a gradient of the broadcast output back to an operand of `n` elements.
fn unbroadcast(grad: &[f64], n: usize) -> Vec<f64> {
    if grad.len() == n {
        return grad.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, g) in grad.iter().enumerate() {
        out[i % n] += g;
    }
    out
}

impl Tape {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Only nodes that (transitively) depend on a trainable leaf receive
    /// gradients; constants and detached nodes stay at zero.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id()].value.shape().to_vec();
        if nodes[loss.id()].value.numel() != 1 {
            return Err(NdError::NonScalarLoss { shape });
        }
        let count = loss.id() + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[loss.id()] = Some(vec![1.0]);

        for id in (0..count).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;

            match &node.op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    for &x in [a, b] {
                        if wants(x) {
                            let n = val(x).numel();
                            accumulate(&mut grads[x], unbroadcast(&g, n));
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], unbroadcast(&g, val(*a).numel()));
                    }
                    if wants(*b) {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        accumulate(&mut grads[*b], unbroadcast(&neg, val(*b).numel()));
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (na, nb) = (va.numel(), vb.numel());
                    if wants(*a) {
                        let ga: Vec<f64> =
                            g.iter().enumerate().map(|(i, x)| x * vb.data()[i % nb]).collect();
                        accumulate(&mut grads[*a], unbroadcast(&ga, na));
                    }
                    if wants(*b) {
                        let gb: Vec<f64> =
                            g.iter().enumerate().map(|(i, x)| x * va.data()[i % na]).collect();
                        accumulate(&mut grads[*b], unbroadcast(&gb, nb));
                    }
                }
                Op::Div { a, b } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (na, nb) = (va.numel(), vb.numel());
                    if wants(*a) {
                        let ga: Vec<f64> =
                            g.iter().enumerate().map(|(i, x)| x / vb.data()[i % nb]).collect();
                        accumulate(&mut grads[*a], unbroadcast(&ga, na));
                    }
                    if wants(*b) {
                        let gb: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, x)| {
                                let d = vb.data()[i % nb];
                                -x * va.data()[i % na] / (d * d)
                            })
                            .collect();
                        accumulate(&mut grads[*b], unbroadcast(&gb, nb));
                    }
                }
                Op::Neg(x) => {
                    accumulate(&mut grads[*x], g.iter().map(|v| -v).collect());
                }
                Op::Exp(x) => {
                    let c = g.iter().zip(out.data()).map(|(a, y)| a * y).collect();
                    accumulate(&mut grads[*x], c);
                }
                Op::Log(x) => {
                    let c = g.iter().zip(val(*x).data()).map(|(a, v)| a / v).collect();
                    accumulate(&mut grads[*x], c);
                }
                Op::Relu(x) => {
                    let c = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(a, v)| if *v > 0.0 { *a } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], c);
                }
                Op::Tanh(x) => {
                    let c = g.iter().zip(out.data()).map(|(a, y)| a * (1.0 - y * y)).collect();
                    accumulate(&mut grads[*x], c);
                }
                Op::Clamp { x, lo, hi } => {
                    let c = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(a, v)| if v >= lo && v <= hi { *a } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], c);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads[*x], g.iter().map(|v| v * c).collect());
                }
                Op::Shift(x) | Op::Reshape(x) => {
                    accumulate(&mut grads[*x], g.clone());
                }
                Op::SumAll(x) => {
                    let n = val(*x).numel();
                    accumulate(&mut grads[*x], vec![g[0]; n]);
                }
                Op::MeanAll(x) => {
                    let n = val(*x).numel();
                    accumulate(&mut grads[*x], vec![g[0] / n as f64; n]);
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let (outer, d, inner) = axis_split(val(*x).shape(), *axis);
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / d as f64
                    } else {
                        1.0
                    };
                    let mut c = vec![0.0; outer * d * inner];
                    for o in 0..outer {
                        for j in 0..d {
                            for i in 0..inner {
                                c[(o * d + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], c);
                }
                Op::Max { x, axis, argmax } => {
                    let (outer, d, inner) = axis_split(val(*x).shape(), *axis);
                    let mut c = vec![0.0; outer * d * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            c[(o * d + argmax[slot]) * inner + i] = g[slot];
                        }
                    }
                    accumulate(&mut grads[*x], c);
                }
                Op::Softmax { x, axis } => {
                    let (outer, d, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let mut c = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * d + j) * inner + i;
                            let dot: f64 = (0..d).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..d {
                                c[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], c);
                }
                Op::L2Normalize { x, axis, norms } => {
                    let (outer, d, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let mut c = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * d + j) * inner + i;
                            let n = norms[o * inner + i];
                            if n > EPS {
                                let dot: f64 = (0..d).map(|j| g[idx(j)] * y[idx(j)]).sum();
                                for j in 0..d {
                                    c[idx(j)] = (g[idx(j)] - y[idx(j)] * dot) / n;
                                }
                            } else {
                                for j in 0..d {
                                    c[idx(j)] = g[idx(j)] / EPS;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], c);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_split(out.shape(), *axis);
                    let mut offset = 0;
                    for &p in inputs {
                        let d = val(p).shape()[*axis];
                        if wants(p) {
                            let mut c = Vec::with_capacity(outer * d * inner);
                            for o in 0..outer {
                                let s = o * total * inner + offset * inner;
                                c.extend_from_slice(&g[s..s + d * inner]);
                            }
                            accumulate(&mut grads[p], c);
                        }
                        offset += d;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, d, inner) = axis_split(val(*x).shape(), *axis);
                    let len = out.shape()[*axis];
                    let mut c = vec![0.0; outer * d * inner];
                    for o in 0..outer {
                        let dst = (o * d + start) * inner;
                        c[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads[*x], c);
                }
                Op::Transpose(x) => {
                    let gt = Tensor::new(out.shape().to_vec(), g.clone()).expect("grad shape");
                    accumulate(&mut grads[*x], transpose_last2(&gt).into_data());
                }
                Op::Expand(x) => {
                    let src = val(*x).shape().to_vec();
                    let map = expand_index_map(&src, out.shape());
                    let mut c = vec![0.0; val(*x).numel()];
                    for (i, v) in g.iter().enumerate() {
                        c[map(i)] += v;
                    }
                    accumulate(&mut grads[*x], c);
                }
                Op::MatMul { a, b, mode } => {
                    let (va, vb) = (val(*a), val(*b));
                    let (sa, sb) = (va.shape(), vb.shape());
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = sb[sb.len() - 1];
                    match mode {
                        MatMulMode::Flat => {
                            let rows: usize = sa[..sa.len() - 1].iter().product();
                            let gm = MatRef::new(&g, rows, n);
                            if wants(*a) {
                                let mut c = vec![0.0; rows * k];
                                gemm(gm, MatRef::new(vb.data(), k, n).t(), &mut c, false);
                                accumulate(&mut grads[*a], c);
                            }
                            if wants(*b) {
                                let mut c = vec![0.0; k * n];
                                gemm(MatRef::new(va.data(), rows, k).t(), gm, &mut c, false);
                                accumulate(&mut grads[*b], c);
                            }
                        }
                        MatMulMode::Batched | MatMulMode::SharedLeft => {
                            let shared = *mode == MatMulMode::SharedLeft;
                            let batch = g.len() / (m * n).max(1);
                            let mut ca = if wants(*a) { Some(vec![0.0; va.numel()]) } else { None };
                            let mut cb = if wants(*b) { Some(vec![0.0; vb.numel()]) } else { None };
                            for bi in 0..batch {
                                let gm = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n);
                                let a_off = if shared { 0 } else { bi * m * k };
                                let am = MatRef::new(&va.data()[a_off..a_off + m * k], m, k);
                                let bm =
                                    MatRef::new(&vb.data()[bi * k * n..(bi + 1) * k * n], k, n);
                                if let Some(ca) = ca.as_mut() {
                                    gemm(gm, bm.t(), &mut ca[a_off..a_off + m * k], true);
                                }
                                if let Some(cb) = cb.as_mut() {
                                    gemm(am.t(), gm, &mut cb[bi * k * n..(bi + 1) * k * n], true);
                                }
                            }
                            if let Some(ca) = ca {
                                accumulate(&mut grads[*a], ca);
                            }
                            if let Some(cb) = cb {
                                accumulate(&mut grads[*b], cb);
                            }
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].requires_grad)
                    .map(|g| Tensor::new(nodes[id].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}
