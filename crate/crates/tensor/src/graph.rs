//! Tape of tensor operations and their forward kernels.
//!
//! Every op appends a node holding its output value, so node order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{dim_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_shape, broadcast_strides, for_each_pair, for_each_run, is_permutation, numel};
use crate::tensor::{permute_data, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    /// tanh approximation of GELU.
    Gelu,
    Exp,
    Neg,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Unary { x: Var, op: UnaryOp },
    Binary { a: Var, b: Var, op: BinaryOp },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    SumAxis { x: Var, axis: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// `tanh` through a single `exp`; several times faster than libm's `tanhf`.
#[inline]
fn fast_tanh<T: Scalar>(z: T) -> T {
    let limit = T::from_f64(15.0);
    if z > limit {
        return T::one();
    }
    if z < -limit {
        return -T::one();
    }
    let e = (z + z).exp();
    (e - T::one()) / (e + T::one())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let x3 = x * x * x;
    let inner = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_C) * x3);
    T::from_f64(0.5) * x * (T::one() + fast_tanh(inner))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_C);
    let inner = c * (x + k * x * x * x);
    let th = fast_tanh(inner);
    let half = T::from_f64(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err("matmul", &sa, &sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return dim_err("matmul", &sa, &sb);
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = match broadcast_shape(ba, bb) {
            Some(s) => s,
            None => return dim_err("matmul", &sa, &sb),
        };
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&shape)];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if bb.is_empty() {
            let rows = numel(ba) * m;
            T::gemm(rows, k, n, av, (k as isize, 1), bv, (n as isize, 1), T::zero(), &mut out);
        } else {
            let sta = broadcast_strides(ba, &batch);
            let stb = broadcast_strides(bb, &batch);
            for_each_pair(&batch, &sta, &stb, |o, ia, ib| {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[ia * m * k..(ia + 1) * m * k],
                    (k as isize, 1),
                    &bv[ib * k * n..(ib + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[o * m * n..(o + 1) * m * n],
                );
            });
        }
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = match op {
            UnaryOp::Gelu => xv.map(gelu),
            UnaryOp::Exp => xv.map(|v| v.exp()),
            UnaryOp::Neg => xv.map(|v| -v),
            UnaryOp::Scale(a) => {
                let a = T::from_f64(a);
                xv.map(|v| v * a)
            }
        };
        self.push("unary", value, Op::Unary { x, op }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(alpha), x)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let f = match op {
            BinaryOp::Add => |x: T, y: T| x + y,
            BinaryOp::Sub => |x: T, y: T| x - y,
            BinaryOp::Mul => |x: T, y: T| x * y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            let shape = match broadcast_shape(av.shape(), bv.shape()) {
                Some(s) => s,
                None => return dim_err("binary", av.shape(), bv.shape()),
            };
            let sa = broadcast_strides(av.shape(), &shape);
            let sb = broadcast_strides(bv.shape(), &shape);
            let mut out = vec![T::zero(); numel(&shape)];
            let (ad, bd) = (av.data(), bv.data());
            for_each_run(&shape, &sa, &sb, |o, i, j, len, da, db| {
                let out = &mut out[o..o + len];
                match (da, db) {
                    (1, 1) => {
                        for ((r, &x), &y) in out.iter_mut().zip(&ad[i..i + len]).zip(&bd[j..j + len]) {
                            *r = f(x, y);
                        }
                    }
                    (1, 0) => {
                        let y = bd[j];
                        for (r, &x) in out.iter_mut().zip(&ad[i..i + len]) {
                            *r = f(x, y);
                        }
                    }
                    (0, 1) => {
                        let x = ad[i];
                        for (r, &y) in out.iter_mut().zip(&bd[j..j + len]) {
                            *r = f(x, y);
                        }
                    }
                    _ => {
                        for (k, r) in out.iter_mut().enumerate() {
                            *r = f(ad[i + k * da], bd[j + k * db]);
                        }
                    }
                }
            });
            Tensor::new(shape, out)?
        };
        self.push("binary", value, Op::Binary { a, b, op }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", &shape, &[axis]);
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Normalization over the last axis with optional affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Parameter {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let dim = *shape.last().ok_or_else(|| TensorError::Usage("layer_norm of a scalar".into()))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [dim] {
                return dim_err("layer_norm", &shape, self.shape(p));
            }
        }
        let rows = xv.numel() / dim.max(1);
        let d = xv.data();
        let mut xhat = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); rows];
        let n = T::from_f64(dim as f64);
        let eps_t = T::from_f64(eps);
        for r in 0..rows {
            let row = &d[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps_t).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = gamma.map(|v| self.value(v).data());
        let b = beta.map(|v| self.value(v).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let c = i % dim;
                let y = match g {
                    Some(g) => h * g[c],
                    None => h,
                };
                match b {
                    Some(b) => y + b[c],
                    None => y,
                }
            })
            .collect();
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if !is_permutation(perm, xv.ndim()) {
            return dim_err("permute", xv.shape(), perm);
        }
        let value = permute_data(xv.shape(), xv.data(), perm);
        self.push("permute", value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return dim_err("transpose", self.shape(x), &[]);
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        self.push("concat", value, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return dim_err("split", shape, sizes);
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::from_f64(xv.numel() as f64));
        self.push("mean", value, Op::Mean { x }, &[x])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return dim_err("sum_axis", &shape, &[axis]);
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[o * len * inner + j * inner + i];
                }
            }
        }
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }
}

/// `(outer, extent, inner)` element counts around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}
