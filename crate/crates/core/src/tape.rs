//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order. Handles ([`Var`])
//! are indices into that record, so the tape is append-only and
//! [`Tape::backward`] can replay it in exact reverse order.
//!
//! Gradients accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`] is called.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, numel, split_axis, strides, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives addressable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Tanh,
    Sigmoid,
    Abs,
    Scale(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Roll { x: Var, axis: usize, shift: usize },
    Gather { x: Var, axis: usize, index: Vec<usize> },
    SegmentSoftmax { x: Var, offsets: Vec<usize> },
    SpMM { weights: Var, x: Var, offsets: Vec<usize>, cols: Vec<usize> },
    LagCorrelation { q: Var, k: Var, axis: usize, delays: Vec<usize> },
    DelayAggregate { v: Var, s: Var, axis: usize, delays: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// Layout of a matmul: (batch, m, k, n, whether b is shared across batch).
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let k = a[a.len() - 1];
    let m = a[a.len() - 2];
    if b[b.len() - 2] != k {
        return Err(Error::shape("matmul", a, b));
    }
    let n = b[b.len() - 1];
    let mut out = a[..a.len() - 1].to_vec();
    out.push(n);
    if b.len() == 2 {
        let batch = numel(&a[..a.len() - 2]);
        return Ok((batch, m, k, n, true, out));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    let batch = numel(&a[..a.len() - 2]);
    Ok((batch, m, k, n, false, out))
}

impl Tape {
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
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Accumulated gradient of `v`, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, op: Unary, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = match op {
            Unary::Neg => xv.map(|v| -v),
            Unary::Exp => xv.map(libm::exp),
            Unary::Tanh => xv.map(libm::tanh),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Abs => xv.map(libm::fabs),
            Unary::Scale(c) => xv.map(|v| v * c),
        };
        let rg = self.rg(x);
        self.push(out, Op::Unary(op, x), rg)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape("elementwise", av.shape(), bv.shape()))?;
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index_map(av.shape(), &out_shape);
            let ib = broadcast_index_map(bv.shape(), &out_shape);
            let (ad, bd) = (av.data(), bv.data());
            ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(op, a, b), rg))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    /// Dispatches one of the named elementwise primitives; binary ops need `b`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| {
            b.ok_or_else(|| Error::Contract(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(a, need(b)?),
            Elementwise::Sub => self.sub(a, need(b)?),
            Elementwise::Mul => self.mul(a, need(b)?),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
            Elementwise::Tanh => Ok(self.tanh(a)),
        }
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product. `b` may be rank 2, in which case it is shared
    /// by every leading batch of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (batch, m, k, n, shared, out_shape) = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; numel(&out_shape)];
        if shared {
            gemm(av.data(), bv.data(), &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &bv.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = libm::exp(src[at(j)] - mx);
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    // ---- structural --------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &x)| d != axis && x != base[d])
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("slice", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::Index(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if numel(shape) != xv.len() {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// General axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "permutation {perm:?} invalid for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let data = permute_data(xv.data(), xv.shape(), perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if a >= rank || b >= rank {
            return Err(Error::Index(format!("transpose axes {a},{b} for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("reduce", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = xv.data();
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let c = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= c);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Circular left shift along `axis`: `out[p] = x[(p + shift) mod n]`,
    /// so `[v1, v2, v3, v4]` rolled by 2 is `[v3, v4, v1, v2]`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("roll", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let shift = shift % n;
        let src = xv.data();
        let mut out = Vec::with_capacity(src.len());
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&src[base + shift * inner..base + n * inner]);
            out.extend_from_slice(&src[base..base + shift * inner]);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Roll { x, axis, shift }, rg))
    }

    /// Selects (possibly repeated) positions along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("gather", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if index.is_empty() {
            return Err(Error::Index("gather with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for axis {axis} of {:?}",
                xv.shape()
            )));
        }
        let src = xv.data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &j in index {
                let base = (o * n + j) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    // ---- sparse / attention-specific ----------------------------------

    /// Softmax over contiguous segments of a rank-1 tensor; segment `r`
    /// spans `offsets[r]..offsets[r + 1]`.
    pub fn segment_softmax(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 1 || offsets.last() != Some(&xv.len()) || offsets.first() != Some(&0) {
            return Err(Error::Contract(format!(
                "segment offsets do not cover a rank-1 tensor of shape {:?}",
                xv.shape()
            )));
        }
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for w in offsets.windows(2) {
            let (s, e) = (w[0], w[1]);
            if e <= s {
                return Err(Error::Contract("empty softmax segment".into()));
            }
            let mx = src[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in s..e {
                out[i] = libm::exp(src[i] - mx);
                sum += out[i];
            }
            for v in &mut out[s..e] {
                *v /= sum;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                x,
                offsets: offsets.to_vec(),
            },
            rg,
        ))
    }

    /// Sparse row-compressed product: `out[r] = Σ_{e in row r} w[e] · x[cols[e]]`
    /// where rows of `x` are its leading-axis slices.
    pub fn spmm(&mut self, weights: Var, x: Var, offsets: &[usize], cols: &[usize]) -> Result<Var> {
        let (wv, xv) = (&self.nodes[weights.0].value, &self.nodes[x.0].value);
        if wv.rank() != 1 || wv.len() != cols.len() || offsets.last() != Some(&cols.len()) {
            return Err(Error::shape("spmm", wv.shape(), &[cols.len()]));
        }
        if xv.rank() == 0 {
            return Err(Error::shape("spmm", wv.shape(), xv.shape()));
        }
        let rows_in = xv.shape()[0];
        if let Some(&bad) = cols.iter().find(|&&c| c >= rows_in) {
            return Err(Error::Index(format!("spmm column {bad} >= {rows_in}")));
        }
        let f = xv.len() / rows_in;
        let rows = offsets.len() - 1;
        let mut out = vec![0.0; rows * f];
        let (w, xd) = (wv.data(), xv.data());
        for r in 0..rows {
            let dst = &mut out[r * f..(r + 1) * f];
            for e in offsets[r]..offsets[r + 1] {
                let src = &xd[cols[e] * f..(cols[e] + 1) * f];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w[e] * s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = rows;
        let rg = self.rg(weights) || self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SpMM {
                weights,
                x,
                offsets: offsets.to_vec(),
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Mean lagged product per delay:
    /// `out[d] = mean_{o,t,i} q[o,t,i] · k[o,(t − τ_d) mod L,i]` with `t` along `axis`.
    ///
    /// This is the time-domain circular cross-correlation at selected delays,
    /// normalized by the number of summed terms.
    pub fn lag_correlation(&mut self, q: Var, k: Var, axis: usize, delays: &[usize]) -> Result<Var> {
        let (qv, kv) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        if qv.shape() != kv.shape() {
            return Err(Error::shape("lag_correlation", qv.shape(), kv.shape()));
        }
        check_axis("lag_correlation", qv.shape(), axis)?;
        if delays.is_empty() {
            return Err(Error::Contract("lag_correlation needs at least one delay".into()));
        }
        let (outer, n, inner) = split_axis(qv.shape(), axis);
        let c = 1.0 / qv.len() as f64;
        let (qd, kd) = (qv.data(), kv.data());
        let out: Vec<f64> = delays
            .iter()
            .map(|&tau| {
                let tau = tau % n;
                let mut acc = 0.0;
                for o in 0..outer {
                    let base = o * n * inner;
                    for t in 0..n {
                        let s = (t + n - tau) % n;
                        let qr = &qd[base + t * inner..base + (t + 1) * inner];
                        let kr = &kd[base + s * inner..base + (s + 1) * inner];
                        acc += qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                acc * c
            })
            .collect();
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::LagCorrelation {
                q,
                k,
                axis,
                delays: delays.to_vec(),
            },
            rg,
        ))
    }

    /// Score-weighted sum of rolled copies:
    /// `out = Σ_d s[d] · roll(v, τ_d)` along `axis`.
    pub fn delay_aggregate(&mut self, v: Var, s: Var, axis: usize, delays: &[usize]) -> Result<Var> {
        let (vv, sv) = (&self.nodes[v.0].value, &self.nodes[s.0].value);
        check_axis("delay_aggregate", vv.shape(), axis)?;
        if sv.rank() != 1 || sv.len() != delays.len() {
            return Err(Error::shape("delay_aggregate", sv.shape(), &[delays.len()]));
        }
        let (outer, n, inner) = split_axis(vv.shape(), axis);
        let (vd, sd) = (vv.data(), sv.data());
        let mut out = vec![0.0; vd.len()];
        for (&tau, &w) in delays.iter().zip(sd) {
            let tau = tau % n;
            for o in 0..outer {
                let base = o * n * inner;
                for p in 0..n {
                    let src = base + ((p + tau) % n) * inner;
                    let dst = base + p * inner;
                    for i in 0..inner {
                        out[dst + i] += w * vd[src + i];
                    }
                }
            }
        }
        let shape = vv.shape().to_vec();
        let rg = self.rg(v) || self.rg(s);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::DelayAggregate {
                v,
                s,
                axis,
                delays: delays.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d loss / d v` into every `requires_grad` node reachable
    /// from `loss`, visiting recorded operations in exact reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xd = val(*x).data();
                let yd = out.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j]
                            * match op {
                                Unary::Neg => -1.0,
                                Unary::Exp => yd[j],
                                Unary::Tanh => 1.0 - yd[j] * yd[j],
                                Unary::Sigmoid => yd[j] * (1.0 - yd[j]),
                                Unary::Abs => {
                                    if xd[j] > 0.0 {
                                        1.0
                                    } else if xd[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Scale(c) => *c,
                            };
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let same = av.shape() == bv.shape();
                let ia = if same { Vec::new() } else { broadcast_index_map(av.shape(), out.shape()) };
                let ib = if same { Vec::new() } else { broadcast_index_map(bv.shape(), out.shape()) };
                let ix = |m: &Vec<usize>, j: usize| if same { j } else { m[j] };
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        let (p, q) = (ix(&ia, j), ix(&ib, j));
                        ga[p] += match op {
                            Binary::Add | Binary::Sub => g[j],
                            Binary::Mul => g[j] * bd[q],
                            Binary::Div => g[j] / bd[q],
                        };
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        let (p, q) = (ix(&ia, j), ix(&ib, j));
                        gb[q] += match op {
                            Binary::Add => g[j],
                            Binary::Sub => -g[j],
                            Binary::Mul => g[j] * ad[p],
                            Binary::Div => -g[j] * ad[p] / (bd[q] * bd[q]),
                        };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, n, shared, _) =
                    matmul_dims(av.shape(), bv.shape()).expect("recorded matmul");
                if shared {
                    acc(*a, &mut |ga| gemm_nt(g, bv.data(), ga, batch * m, k, n));
                    acc(*b, &mut |gb| gemm_tn(av.data(), g, gb, batch * m, k, n));
                } else {
                    acc(*a, &mut |ga| {
                        for bi in 0..batch {
                            gemm_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv.data()[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                    acc(*b, &mut |gb| {
                        for bi in 0..batch {
                            gemm_tn(
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + ii;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    if wants(*v) {
                        acc(*v, &mut |gv| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                for j in 0..len * inner {
                                    gv[dst + j] += g[src + j];
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let back = permute_data(g, out.shape(), &inv);
                acc(*x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let c = if matches!(nodes[i].op, Op::Mean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for ii in 0..inner {
                                gx[(o * n + j) * inner + ii] += c * g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::MeanAll(x) => {
                let c = g[0] / val(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += c));
            }
            Op::Roll { x, axis, shift } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for p in 0..n {
                            let src = (o * n + p) * inner;
                            let dst = (o * n + (p + shift) % n) * inner;
                            for ii in 0..inner {
                                gx[dst + ii] += g[src + ii];
                            }
                        }
                    }
                });
            }
            Op::Gather { x, axis, index } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let m = index.len();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for (jj, &j) in index.iter().enumerate() {
                            let src = (o * m + jj) * inner;
                            let dst = (o * n + j) * inner;
                            for ii in 0..inner {
                                gx[dst + ii] += g[src + ii];
                            }
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for w in offsets.windows(2) {
                        let dot: f64 = (w[0]..w[1]).map(|j| g[j] * y[j]).sum();
                        for j in w[0]..w[1] {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::SpMM {
                weights,
                x,
                offsets,
                cols,
            } => {
                let (wv, xv) = (val(*weights), val(*x));
                let f = xv.len() / xv.shape()[0];
                let (wd, xd) = (wv.data(), xv.data());
                acc(*weights, &mut |gw| {
                    for r in 0..offsets.len() - 1 {
                        let gr = &g[r * f..(r + 1) * f];
                        for e in offsets[r]..offsets[r + 1] {
                            let xr = &xd[cols[e] * f..(cols[e] + 1) * f];
                            gw[e] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..offsets.len() - 1 {
                        let gr = &g[r * f..(r + 1) * f];
                        for e in offsets[r]..offsets[r + 1] {
                            let dst = &mut gx[cols[e] * f..(cols[e] + 1) * f];
                            for (d, &s) in dst.iter_mut().zip(gr) {
                                *d += wd[e] * s;
                            }
                        }
                    }
                });
            }
            Op::LagCorrelation { q, k, axis, delays } => {
                let (qv, kv) = (val(*q), val(*k));
                let (outer, n, inner) = split_axis(qv.shape(), *axis);
                let c = 1.0 / qv.len() as f64;
                let (qd, kd) = (qv.data(), kv.data());
                acc(*q, &mut |gq| {
                    for (d, &tau) in delays.iter().enumerate() {
                        let w = g[d] * c;
                        let tau = tau % n;
                        for o in 0..outer {
                            let base = o * n * inner;
                            for t in 0..n {
                                let s = (t + n - tau) % n;
                                for ii in 0..inner {
                                    gq[base + t * inner + ii] += w * kd[base + s * inner + ii];
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for (d, &tau) in delays.iter().enumerate() {
                        let w = g[d] * c;
                        let tau = tau % n;
                        for o in 0..outer {
                            let base = o * n * inner;
                            for t in 0..n {
                                let s = (t + n - tau) % n;
                                for ii in 0..inner {
                                    gk[base + s * inner + ii] += w * qd[base + t * inner + ii];
                                }
                            }
                        }
                    }
                });
            }
            Op::DelayAggregate { v, s, axis, delays } => {
                let (vv, sv) = (val(*v), val(*s));
                let (outer, n, inner) = split_axis(vv.shape(), *axis);
                let (vd, sd) = (vv.data(), sv.data());
                acc(*v, &mut |gv| {
                    for (&tau, &w) in delays.iter().zip(sd) {
                        let tau = tau % n;
                        for o in 0..outer {
                            let base = o * n * inner;
                            for p in 0..n {
                                let dst = base + ((p + tau) % n) * inner;
                                let src = base + p * inner;
                                for ii in 0..inner {
                                    gv[dst + ii] += w * g[src + ii];
                                }
                            }
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for (d, &tau) in delays.iter().enumerate() {
                        let tau = tau % n;
                        let mut total = 0.0;
                        for o in 0..outer {
                            let base = o * n * inner;
                            for p in 0..n {
                                let src = base + ((p + tau) % n) * inner;
                                let dst = base + p * inner;
                                for ii in 0..inner {
                                    total += g[dst + ii] * vd[src + ii];
                                }
                            }
                        }
                        gs[d] += total;
                    }
                });
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
