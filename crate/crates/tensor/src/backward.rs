//! Reverse sweep over a [`Graph`].

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::graph::{axis_split, gelu_grad, BinaryOp, Graph, Node, Op, UnaryOp, Var};
use crate::scalar::Scalar;
use crate::shape::{broadcast_strides, for_each_pair, for_each_run, inverse_permutation, numel};
use crate::tensor::{permute_data, Tensor};

/// Gradients of a scalar loss with respect to the trainable leaves of a graph.
///
/// Leaves that the loss does not reach are absent, which means zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn get_or_zeros(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn slot<'a, T: Scalar>(bufs: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    bufs[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
}

impl<T: Scalar> Graph<T> {
    /// Accumulates d(loss)/d(node) in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(TensorError::Usage(
                "loss is not connected to any requires_grad leaf".into(),
            ));
        }
        let nodes = &self.nodes[..=loss.0];
        let mut bufs: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        bufs[loss.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();
        for i in (0..nodes.len()).rev() {
            let Some(g) = bufs[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            let node = &nodes[i];
            let need = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b } => backward_matmul(nodes, &mut bufs, &g, *a, *b, node.value.shape()),
                Op::Unary { x, op } => {
                    if need(*x) {
                        let xv = nodes[x.0].value.data();
                        let yv = node.value.data();
                        let gx = slot(&mut bufs, nodes, *x);
                        match op {
                            UnaryOp::Gelu => {
                                for k in 0..g.len() {
                                    gx[k] = gx[k] + g[k] * gelu_grad(xv[k]);
                                }
                            }
                            UnaryOp::Exp => {
                                for k in 0..g.len() {
                                    gx[k] = gx[k] + g[k] * yv[k];
                                }
                            }
                            UnaryOp::Neg => {
                                for k in 0..g.len() {
                                    gx[k] = gx[k] - g[k];
                                }
                            }
                            UnaryOp::Scale(a) => {
                                let a = T::from_f64(*a);
                                for k in 0..g.len() {
                                    gx[k] = gx[k] + g[k] * a;
                                }
                            }
                        }
                    }
                }
                Op::Binary { a, b, op } => backward_binary(nodes, &mut bufs, &g, *a, *b, *op, node.value.shape()),
                Op::Softmax { x, axis } => {
                    if need(*x) {
                        let y = node.value.data();
                        let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                        let gx = slot(&mut bufs, nodes, *x);
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| o * len * inner + j * inner + i;
                                let mut dot = T::zero();
                                for j in 0..len {
                                    dot = dot + g[at(j)] * y[at(j)];
                                }
                                for j in 0..len {
                                    let k = at(j);
                                    gx[k] = gx[k] + y[k] * (g[k] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let dim = *node.value.shape().last().unwrap();
                    let rows = rstd.len();
                    if let Some(b) = beta {
                        if need(*b) {
                            let gb = slot(&mut bufs, nodes, *b);
                            for (k, &gk) in g.iter().enumerate() {
                                gb[k % dim] = gb[k % dim] + gk;
                            }
                        }
                    }
                    if let Some(gm) = gamma {
                        if need(*gm) {
                            let gg = slot(&mut bufs, nodes, *gm);
                            for (k, &gk) in g.iter().enumerate() {
                                gg[k % dim] = gg[k % dim] + gk * xhat[k];
                            }
                        }
                    }
                    if need(*x) {
                        let gamma_v = gamma.map(|v| nodes[v.0].value.data().to_vec());
                        let n = T::from_f64(dim as f64);
                        let gx = slot(&mut bufs, nodes, *x);
                        let mut dxhat = vec![T::zero(); dim];
                        for r in 0..rows {
                            let base = r * dim;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for c in 0..dim {
                                let d = match &gamma_v {
                                    Some(gv) => g[base + c] * gv[c],
                                    None => g[base + c],
                                };
                                dxhat[c] = d;
                                m1 = m1 + d;
                                m2 = m2 + d * xhat[base + c];
                            }
                            m1 = m1 / n;
                            m2 = m2 / n;
                            for c in 0..dim {
                                let k = base + c;
                                gx[k] = gx[k] + rstd[r] * (dxhat[c] - m1 - xhat[k] * m2);
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if need(*x) {
                        let gx = slot(&mut bufs, nodes, *x);
                        for (d, s) in gx.iter_mut().zip(&g) {
                            *d = *d + *s;
                        }
                    }
                }
                Op::Permute { x, perm } => {
                    if need(*x) {
                        let back = permute_data(node.value.shape(), &g, &inverse_permutation(perm));
                        let gx = slot(&mut bufs, nodes, *x);
                        for (d, s) in gx.iter_mut().zip(back.data()) {
                            *d = *d + *s;
                        }
                    }
                }
                Op::Concat { xs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for x in xs {
                        let ext = nodes[x.0].value.shape()[*axis];
                        if need(*x) {
                            let gx = slot(&mut bufs, nodes, *x);
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                let dst = o * ext * inner;
                                for k in 0..ext * inner {
                                    gx[dst + k] = gx[dst + k] + g[src + k];
                                }
                            }
                        }
                        offset += ext;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    if need(*x) {
                        let src_shape = nodes[x.0].value.shape();
                        let outer: usize = src_shape[..*axis].iter().product();
                        let inner: usize = src_shape[axis + 1..].iter().product();
                        let ext = src_shape[*axis];
                        let len = node.value.shape()[*axis];
                        let gx = slot(&mut bufs, nodes, *x);
                        for o in 0..outer {
                            let dst = o * ext * inner + start * inner;
                            let src = o * len * inner;
                            for k in 0..len * inner {
                                gx[dst + k] = gx[dst + k] + g[src + k];
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if need(*x) {
                        let gx = slot(&mut bufs, nodes, *x);
                        for d in gx.iter_mut() {
                            *d = *d + g[0];
                        }
                    }
                }
                Op::Mean { x } => {
                    if need(*x) {
                        let gx = slot(&mut bufs, nodes, *x);
                        let s = g[0] / T::from_f64(gx.len() as f64);
                        for d in gx.iter_mut() {
                            *d = *d + s;
                        }
                    }
                }
                Op::SumAxis { x, axis } => {
                    if need(*x) {
                        let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                        let gx = slot(&mut bufs, nodes, *x);
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    let k = o * len * inner + j * inner + i;
                                    gx[k] = gx[k] + g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn backward_matmul<T: Scalar>(
    nodes: &[Node<T>],
    bufs: &mut [Option<Vec<T>>],
    g: &[T],
    a: Var,
    b: Var,
    out_shape: &[usize],
) {
    let sa = nodes[a.0].value.shape();
    let sb = nodes[b.0].value.shape();
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    let (ki, ni) = (k as isize, n as isize);
    if sb.len() == 2 {
        let rows = numel(sa) / k.max(1);
        if nodes[a.0].requires_grad {
            let ga = slot(bufs, nodes, a);
            // dA = dC @ Bᵀ
            T::gemm(rows, n, k, g, (ni, 1), bv, (1, ni), T::one(), ga);
        }
        if nodes[b.0].requires_grad {
            let gb = slot(bufs, nodes, b);
            // dB = Aᵀ @ dC
            T::gemm(k, rows, n, av, (1, ki), g, (ni, 1), T::one(), gb);
        }
        return;
    }
    let batch = &out_shape[..out_shape.len() - 2];
    let sta = broadcast_strides(&sa[..sa.len() - 2], batch);
    let stb = broadcast_strides(&sb[..sb.len() - 2], batch);
    if nodes[a.0].requires_grad {
        let ga = slot(bufs, nodes, a);
        for_each_pair(batch, &sta, &stb, |o, ia, ib| {
            T::gemm(
                m,
                n,
                k,
                &g[o * m * n..(o + 1) * m * n],
                (ni, 1),
                &bv[ib * k * n..(ib + 1) * k * n],
                (1, ni),
                T::one(),
                &mut ga[ia * m * k..(ia + 1) * m * k],
            );
        });
    }
    if nodes[b.0].requires_grad {
        let gb = slot(bufs, nodes, b);
        for_each_pair(batch, &sta, &stb, |o, ia, ib| {
            T::gemm(
                k,
                m,
                n,
                &av[ia * m * k..(ia + 1) * m * k],
                (1, ki),
                &g[o * m * n..(o + 1) * m * n],
                (ni, 1),
                T::one(),
                &mut gb[ib * k * n..(ib + 1) * k * n],
            );
        });
    }
}

fn backward_binary<T: Scalar>(
    nodes: &[Node<T>],
    bufs: &mut [Option<Vec<T>>],
    g: &[T],
    a: Var,
    b: Var,
    op: BinaryOp,
    out_shape: &[usize],
) {
    let sa_shape = nodes[a.0].value.shape();
    let sb_shape = nodes[b.0].value.shape();
    let sa = broadcast_strides(sa_shape, out_shape);
    let sb = broadcast_strides(sb_shape, out_shape);
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    if nodes[a.0].requires_grad {
        let ga = slot(bufs, nodes, a);
        // d/da: g for add/sub, g·b for mul
        accumulate_runs(out_shape, &sa, &sb, ga, g, (op == BinaryOp::Mul).then_some(bv), T::one());
    }
    if nodes[b.0].requires_grad {
        let gb = slot(bufs, nodes, b);
        let sign = if op == BinaryOp::Sub { -T::one() } else { T::one() };
        accumulate_runs(out_shape, &sb, &sa, gb, g, (op == BinaryOp::Mul).then_some(av), sign);
    }
}

/// `dst[i] += sign · g[o] · other[j]` over the broadcast iteration, where `i`
/// follows `s_dst` and `j` follows `s_other` (`other = None` means 1).
fn accumulate_runs<T: Scalar>(
    out_shape: &[usize],
    s_dst: &[usize],
    s_other: &[usize],
    dst: &mut [T],
    g: &[T],
    other: Option<&[T]>,
    sign: T,
) {
    for_each_run(out_shape, s_dst, s_other, |o, i, j, len, di, dj| {
        let gr = &g[o..o + len];
        match (di, other) {
            (1, None) => {
                for (d, &gv) in dst[i..i + len].iter_mut().zip(gr) {
                    *d = *d + sign * gv;
                }
            }
            (0, None) => {
                let s: T = gr.iter().copied().sum();
                dst[i] = dst[i] + sign * s;
            }
            (1, Some(ov)) if dj == 1 => {
                for ((d, &gv), &x) in dst[i..i + len].iter_mut().zip(gr).zip(&ov[j..j + len]) {
                    *d = *d + sign * gv * x;
                }
            }
            (1, Some(ov)) if dj == 0 => {
                let x = ov[j];
                for (d, &gv) in dst[i..i + len].iter_mut().zip(gr) {
                    *d = *d + sign * gv * x;
                }
            }
            (0, Some(ov)) if dj == 1 => {
                let s: T = gr.iter().zip(&ov[j..j + len]).map(|(&gv, &x)| gv * x).sum();
                dst[i] = dst[i] + sign * s;
            }
            _ => {
                for (k, &gv) in gr.iter().enumerate() {
                    let x = other.map_or(T::one(), |ov| ov[j + k * dj]);
                    dst[i + k * di] = dst[i + k * di] + sign * gv * x;
                }
            }
        }
    });
}
