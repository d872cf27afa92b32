use super::kernels::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, gemm_grad_a, gemm_grad_b,
    permute_source_offsets, split_axis,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Powf(f64),
    Sigmoid,
    Tanh,
    Gelu,
    Silu,
    Abs,
    ClampMax(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MaskFill(Var, Vec<bool>),
    MatMul(Var, Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    Max(Var, usize, Vec<usize>),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
    ScatterAdd(Var, usize, Vec<usize>),
    Rope(Var, Vec<f64>, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// [`Graph::backward`] simply walks the tape in reverse and visits each node
/// once. Gradients accumulate into parents; a variable used twice receives
/// the sum of both contributions.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Powf(p) => x.powf(p),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => gelu(x),
        Unary::Silu => x * sigmoid(x),
        Unary::Abs => x.abs(),
        Unary::ClampMax(c) => x.min(c),
        Unary::Scale(c) => x * c,
        Unary::AddScalar(c) => x + c,
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Powf(p) => p * x.powf(p - 1.0),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Gelu => gelu_grad(x),
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::ClampMax(c) => {
            if x < c {
                1.0
            } else {
                0.0
            }
        }
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut a_offsets = Vec::new();
    let mut b_offsets = Vec::new();
    for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| {
        a_offsets.push(ia * m * k);
        b_offsets.push(ib * k * n);
    });
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_offsets,
        b_offsets,
    })
}

fn rope_tables(positions: &[f64], half: usize, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for p in 0..half {
            let freq = base.powf(-2.0 * p as f64 / head_dim as f64);
            let (s, c) = (pos * freq).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos, sin)
}

/// Applies a pairwise rotation to rows `[.., M, head_dim]`; `sign = -1`
/// applies the inverse rotation.
fn rope_rotate(x: &[f64], out: &mut [f64], rows: usize, head_dim: usize, cos: &[f64], sin: &[f64], sign: f64) {
    let half = head_dim / 2;
    let m = cos.len() / half;
    for r in 0..rows {
        let pos = r % m;
        let xr = &x[r * head_dim..(r + 1) * head_dim];
        let or = &mut out[r * head_dim..(r + 1) * head_dim];
        for p in 0..half {
            let (c, s) = (cos[pos * half + p], sign * sin[pos * half + p]);
            let (x0, x1) = (xr[2 * p], xr[2 * p + 1]);
            or[2 * p] += x0 * c - x1 * s;
            or[2 * p + 1] += x0 * s + x1 * c;
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Graph::backward`] loss w.r.t. `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut data = vec![0.0; shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise quotient; division by zero yields IEEE infinities.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| unary_forward(kind, v));
        let rg = self.rg(x);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Unary::Ln, x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(Unary::Powf(p), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// `min(x, c)`; the gradient is 1 strictly below `c` and 0 otherwise.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::ClampMax(c), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }

    /// Replaces elements where `mask` is true with `value`. Filled positions
    /// pass no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.numel() {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskFill(x, mask.to_vec()), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch
    /// dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut data = vec![0.0; plan.out_shape.iter().product()];
        for (bi, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
            gemm(
                &ta[oa..oa + m * k],
                &tb[ob..ob + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::from_parts(plan.out_shape, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    // ---- reductions --------------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let src = t.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[o * n * inner + j * inner..o * n * inner + (j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = n as f64;
            data.iter_mut().for_each(|v| *v /= inv);
        }
        let out = Tensor::from_parts(Self::reduced_shape(t.shape(), axis, keepdim), data);
        let rg = self.rg(x);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(out, op, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, true)
    }

    /// Maximum along `axis` and the index of the winner; ties resolve to the
    /// lowest index. The gradient flows to the winning position only.
    pub fn max_with_indices(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<(Var, Vec<usize>)> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        let src = t.data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut idx = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = o * inner + i;
                for j in 0..n {
                    let v = src[o * n * inner + j * inner + i];
                    if j == 0 || v > data[lane] {
                        data[lane] = v;
                        idx[lane] = j;
                    }
                }
            }
        }
        let out = Tensor::from_parts(Self::reduced_shape(t.shape(), axis, keepdim), data);
        let rg = self.rg(x);
        let v = self.push(out, Op::Max(x, axis, idx.clone()), rg);
        Ok((v, idx))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: t.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let offsets = permute_source_offsets(t.shape(), axes);
        let src = t.data();
        let data = offsets.iter().map(|&o| src[o]).collect();
        let shape = axes.iter().map(|&a| t.shape()[a]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::Axis {
                axis: a.max(b),
                rank: axes.len(),
            });
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        if len == 0 || start + len > n {
            return Err(Error::Shape {
                op: "narrow",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow(x, axis, start), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base_shape[i]);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Gathers slices `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::Shape {
                op: "index_select",
                lhs: t.shape().to_vec(),
                rhs: indices.to_vec(),
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let base = o * n * inner + j * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::IndexSelect(x, axis, indices.to_vec()), rg))
    }

    /// Inverse of [`Graph::index_select`]: slice `j` of `x` along `axis` is
    /// added into slice `indices[j]` of a zero tensor with extent `size`.
    pub fn scatter_add(&mut self, x: Var, axis: usize, indices: &[usize], size: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        if indices.len() != n || size == 0 || indices.iter().any(|&i| i >= size) {
            return Err(Error::Shape {
                op: "scatter_add",
                lhs: t.shape().to_vec(),
                rhs: indices.to_vec(),
            });
        }
        let src = t.data();
        let mut data = vec![0.0; outer * size * inner];
        for o in 0..outer {
            for (j, &dst) in indices.iter().enumerate() {
                let s = o * n * inner + j * inner;
                let d = o * size * inner + dst * inner;
                for (out, &v) in data[d..d + inner].iter_mut().zip(&src[s..s + inner]) {
                    *out += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = size;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ScatterAdd(x, axis, indices.to_vec()), rg))
    }

    /// Rotary position embedding over `[.., M, head_dim]`: the pair
    /// `(2i, 2i+1)` of row `m` is rotated by `positions[m] · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let bad = || Error::Shape {
            op: "rope",
            lhs: t.shape().to_vec(),
            rhs: vec![positions.len()],
        };
        if rank < 2 {
            return Err(bad());
        }
        let (m, hd) = (t.shape()[rank - 2], t.shape()[rank - 1]);
        if hd % 2 != 0 || m != positions.len() {
            return Err(bad());
        }
        let (cos, sin) = rope_tables(positions, hd / 2, hd, base);
        let rows = t.numel() / hd;
        let mut data = vec![0.0; t.numel()];
        rope_rotate(t.data(), &mut data, rows, hd, &cos, &sin, 1.0);
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rope(x, positions.to_vec(), base), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`. Previous gradients are
    /// cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidShape {
                shape: lv.shape().to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Graph { nodes, grads } = self;
        let nodes = &*nodes;
        let node = &nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(grads, nodes, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let out = node.value.shape();
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                let (da, db) = (ta.data(), tb.data());
                with_grad!(a, |ga| {
                    for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            Binary::Add | Binary::Sub => g[o],
                            Binary::Mul => g[o] * db[ib],
                            Binary::Div => g[o] / db[ib],
                        };
                    });
                });
                with_grad!(b, |gb| {
                    for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            Binary::Add => g[o],
                            Binary::Sub => -g[o],
                            Binary::Mul => g[o] * da[ia],
                            Binary::Div => -g[o] * da[ia] / (db[ib] * db[ib]),
                        };
                    });
                });
            }
            Op::Unary(kind, x) => {
                let xs = nodes[x.0].value.data();
                let ys = node.value.data();
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * unary_derivative(*kind, xs[j], ys[j]);
                    }
                });
            }
            Op::MaskFill(x, mask) => {
                with_grad!(*x, |gx| {
                    for j in 0..g.len() {
                        if !mask[j] {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = matmul_plan(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                with_grad!(a, |ga| {
                    for (bi, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                        gemm_grad_a(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[ob..ob + k * n],
                            &mut ga[oa..oa + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                with_grad!(b, |gb| {
                    for (bi, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                        gemm_grad_b(
                            &ta.data()[oa..oa + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("validated");
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                let yj = y[at(j)];
                                if yj != 0.0 {
                                    gx[at(j)] += yj * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis).expect("validated");
                let scale = if matches!(node.op, Op::Mean(..)) { 1.0 / n as f64 } else { 1.0 };
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = o * n * inner + j * inner;
                            for i in 0..inner {
                                gx[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Max(x, axis, idx) => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis).expect("validated");
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let lane = o * inner + i;
                            gx[o * n * inner + idx[lane] * inner + i] += g[lane];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
            }
            Op::Permute(x, axes) => {
                let offsets = permute_source_offsets(nodes[x.0].value.shape(), axes);
                with_grad!(*x, |gx| {
                    for (o, &src) in offsets.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::Narrow(x, axis, start) => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis).expect("validated");
                let len = node.value.shape()[*axis];
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis).expect("validated");
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x.0].value.shape()[*axis];
                    with_grad!(x, |gx| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for j in 0..n * inner {
                                gx[o * n * inner + j] += g[src + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::IndexSelect(x, axis, indices) => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis).expect("validated");
                let len = indices.len();
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for (j, &src) in indices.iter().enumerate() {
                            let d = o * n * inner + src * inner;
                            let s = o * len * inner + j * inner;
                            for t in 0..inner {
                                gx[d + t] += g[s + t];
                            }
                        }
                    }
                });
            }
            Op::ScatterAdd(x, axis, indices) => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis).expect("validated");
                let size = node.value.shape()[*axis];
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for (j, &dst) in indices.iter().enumerate() {
                            let s = o * size * inner + dst * inner;
                            let d = o * n * inner + j * inner;
                            for t in 0..inner {
                                gx[d + t] += g[s + t];
                            }
                        }
                    }
                });
            }
            Op::Rope(x, positions, base) => {
                let shape = node.value.shape();
                let hd = shape[shape.len() - 1];
                let (cos, sin) = rope_tables(positions, hd / 2, hd, *base);
                let rows = node.value.numel() / hd;
                with_grad!(*x, |gx| {
                    rope_rotate(g, gx, rows, hd, &cos, &sin, -1.0);
                });
            }
        }
    }
}
