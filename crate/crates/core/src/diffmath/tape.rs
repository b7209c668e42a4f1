//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward sweep is a single reverse scan.

use super::tensor::{dims2, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax { x: usize, lanes: Lanes },
    LogSumExp { x: usize, lanes: Lanes },
    MaskedLogSumExp { x: usize, mask: Vec<bool> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, end: usize },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumAxis { x: usize, lanes: Lanes },
    RowNormalize { x: usize, sums: Vec<f64> },
    Bilinear { zh: usize, w: usize, zt: usize },
    BceWithLogits { x: usize, targets: Vec<f64> },
    CrossEntropy { x: usize, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reduction lanes of a rank-1 or rank-2 tensor along one axis.
#[derive(Debug, Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    stride: usize,
    step: usize,
}

impl Lanes {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<(Lanes, Vec<usize>)> {
        match (shape.len(), axis) {
            (1, 0) => Ok((
                Lanes { count: 1, len: shape[0], stride: 1, step: 0 },
                Vec::new(),
            )),
            (2, 1) => Ok((
                Lanes { count: shape[0], len: shape[1], stride: 1, step: shape[1] },
                vec![shape[0]],
            )),
            (2, 0) => Ok((
                Lanes { count: shape[1], len: shape[0], stride: shape[1], step: 1 },
                vec![shape[1]],
            )),
            _ => Err(Error::Shape { op, lhs: shape.to_vec(), rhs: vec![axis] }),
        }
    }

    #[inline]
    fn index(&self, lane: usize, i: usize) -> usize {
        lane * self.step + i * self.stride
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient as a flat slice, zero-filled semantics left to the caller.
    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, Vec<usize>)> {
    let (ar, ac) = dims2(a);
    let (br, bc) = dims2(b);
    let rows = if ar == br || br == 1 { ar } else if ar == 1 { br } else { 0 };
    let cols = if ac == bc || bc == 1 { ac } else if ac == 1 { bc } else { 0 };
    if rows == 0 || cols == 0 || a.len() > 2 || b.len() > 2 {
        return Err(Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    let shape = if dims2(a) == (rows, cols) {
        a.to_vec()
    } else if dims2(b) == (rows, cols) {
        b.to_vec()
    } else {
        vec![rows, cols]
    };
    Ok((rows, cols, shape))
}

#[inline]
fn bidx(shape: &[usize], i: usize, j: usize) -> usize {
    let (r, c) = dims2(shape);
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

/// Sums a full-size gradient down to the operand's (broadcast) shape.
fn reduce_to(shape: &[usize], rows: usize, cols: usize, g: &[f64]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    if n == rows * cols {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for i in 0..rows {
        for j in 0..cols {
            out[bidx(shape, i, j)] += g[i * cols + j];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push("leaf", value, Op::Leaf, &[]).expect("non-finite leaf value")
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, Op::Constant, &[]).expect("non-finite constant value")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape { op: "matmul", lhs: av.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols, shape) = broadcast_dims(name, av.shape(), bv.shape())?;
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(f(av.data()[bidx(av.shape(), i, j)], bv.data()[bidx(bv.shape(), i, j)]));
            }
        }
        Tensor::new(shape, out)
    }

    /// Elementwise sum; `b` may broadcast along rows or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * k).collect())?;
        self.push("scale", t, Op::Scale(x.0, k), &[x.0])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.push(name, t, op, &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x.0), |a| a.max(0.0))
    }

    /// Max-shifted softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (lanes, _) = Lanes::of("softmax", v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for l in 0..lanes.count {
            let mx = (0..lanes.len).map(|i| src[lanes.index(l, i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..lanes.len {
                let k = lanes.index(l, i);
                out[k] = (src[k] - mx).exp();
                z += out[k];
            }
            for i in 0..lanes.len {
                out[lanes.index(l, i)] /= z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax { x: x.0, lanes }, &[x.0])
    }

    /// Max-shifted `log Σ exp` reducing `axis`.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (lanes, out_shape) = Lanes::of("logsumexp", v.shape(), axis)?;
        let src = v.data();
        let out: Vec<f64> = (0..lanes.count)
            .map(|l| lse((0..lanes.len).map(|i| src[lanes.index(l, i)])))
            .collect();
        let t = Tensor::new(out_shape, out)?;
        self.push("logsumexp", t, Op::LogSumExp { x: x.0, lanes }, &[x.0])
    }

    /// Row-wise `log Σ exp` over the entries where `mask` is true. Every
    /// row must select at least one entry.
    pub fn masked_logsumexp_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || mask.len() != v.len() {
            return Err(Error::Shape { op: "masked_logsumexp", lhs: v.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let sel = &mask[i * n..(i + 1) * n];
            if !sel.iter().any(|&b| b) {
                return Err(Error::Shape { op: "masked_logsumexp", lhs: v.shape().to_vec(), rhs: vec![i] });
            }
            out.push(lse(row.iter().zip(sel).filter(|(_, &s)| s).map(|(&a, _)| a)));
        }
        let t = Tensor::new(vec![m], out)?;
        self.push("masked_logsumexp", t, Op::MaskedLogSumExp { x: x.0, mask: mask.to_vec() }, &[x.0])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = v.dims2();
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::Shape { op: "layer_norm", lhs: v.shape().to_vec(), rhs: self.value(gain).shape().to_vec() });
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            &[x.0, gain.0, bias.0],
        )
    }

    /// Rows of `table` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape { op: "embedding_gather", lhs: tv.shape().to_vec(), rhs: vec![ids.len()] });
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownToken { id, vocab: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding_gather", t, Op::Gather { table: table.0, ids: ids.to_vec() }, &[table.0])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Shape { op: "concat", lhs: vec![], rhs: vec![] })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Shape { op: "concat", lhs: base, rhs: vec![axis] });
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(Error::Shape { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    /// Stacks equal-shape vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = self.value(r).shape().to_vec();
            if s.len() != 1 {
                return Err(Error::Shape { op: "stack", lhs: s, rhs: vec![] });
            }
            reshaped.push(self.reshape(r, &[1, s[0]])?);
        }
        self.concat(&reshaped, 0)
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape { op: "slice", lhs: shape, rhs: vec![axis, start, end] });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let t = Tensor::new(new_shape, out)?;
        self.push("slice", t, Op::Slice { x: x.0, axis, start, end }, &[x.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: v.shape().to_vec(), rhs: vec![] });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let t = Tensor::new(vec![n, m], transpose_raw(v.data(), m, n))?;
        self.push("transpose", t, Op::Transpose(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(shape.to_vec(), v.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: v.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.push("reshape", t, Op::Reshape(x.0), &[x.0])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (lanes, out_shape) = Lanes::of("sum_axis", v.shape(), axis)?;
        let out: Vec<f64> = (0..lanes.count)
            .map(|l| (0..lanes.len).map(|i| v.data()[lanes.index(l, i)]).sum())
            .collect();
        let t = Tensor::new(out_shape, out)?;
        self.push("sum_axis", t, Op::SumAxis { x: x.0, lanes }, &[x.0])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.value(x).shape().get(axis).ok_or(Error::Shape {
            op: "mean_axis",
            lhs: self.value(x).shape().to_vec(),
            rhs: vec![axis],
        })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Divides each row by its sum. A row summing to zero becomes uniform
    /// (and passes no gradient).
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::Shape { op: "row_normalize", lhs: v.shape().to_vec(), rhs: vec![] });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; m * n];
        let mut sums = vec![0.0; m];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            sums[i] = s;
            if s == 0.0 {
                log::warn!("row_normalize: zero row sum at row {i}; using uniform weights");
                out[i * n..(i + 1) * n].fill(1.0 / n as f64);
            } else {
                for j in 0..n {
                    out[i * n + j] = row[j] / s;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("row_normalize", t, Op::RowNormalize { x: x.0, sums }, &[x.0])
    }

    /// `y[p, c] = zh[p]ᵀ · w[c] · zt[p]` for `zh, zt: [P, d]`, `w: [C, d, d]`.
    pub fn bilinear(&mut self, zh: Var, w: Var, zt: Var) -> Result<Var> {
        let (hv, wv, tv) = (self.value(zh), self.value(w), self.value(zt));
        let ok = hv.rank() == 2
            && hv.shape() == tv.shape()
            && wv.rank() == 3
            && wv.shape()[1] == hv.shape()[1]
            && wv.shape()[2] == hv.shape()[1];
        if !ok {
            return Err(Error::Shape { op: "bilinear", lhs: hv.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        let (p, d, c) = (hv.shape()[0], hv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; p * c];
        let mut tmp = vec![0.0; d];
        for k in 0..c {
            let wk = &wv.data()[k * d * d..(k + 1) * d * d];
            for q in 0..p {
                // tmp = W_k zt
                let ztq = tv.row(q);
                for i in 0..d {
                    tmp[i] = wk[i * d..(i + 1) * d].iter().zip(ztq).map(|(a, b)| a * b).sum();
                }
                out[q * c + k] = hv.row(q).iter().zip(&tmp).map(|(a, b)| a * b).sum();
            }
        }
        let t = Tensor::new(vec![p, c], out)?;
        self.push("bilinear", t, Op::Bilinear { zh: zh.0, w: w.0, zt: zt.0 }, &[zh.0, w.0, zt.0])
    }

    /// Summed binary cross-entropy between `sigmoid(x)` and `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if targets.len() != v.len() {
            return Err(Error::Shape { op: "bce_with_logits", lhs: v.shape().to_vec(), rhs: vec![targets.len()] });
        }
        let s = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&a, &y)| softplus(a) - a * y)
            .sum();
        self.push("bce_with_logits", Tensor::scalar(s), Op::BceWithLogits { x: x.0, targets: targets.to_vec() }, &[x.0])
    }

    /// Summed `-log softmax(x)[target]` over the rows of `x`.
    pub fn cross_entropy_from_logits(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = v.dims2();
        if v.rank() > 2 || targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::Shape { op: "cross_entropy", lhs: v.shape().to_vec(), rhs: vec![targets.len()] });
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let z = lse(row.iter().copied());
            for j in 0..n {
                probs[i * n + j] = (row[j] - z).exp();
            }
            loss += z - row[targets[i]];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { x: x.0, targets: targets.to_vec(), probs },
            &[x.0],
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape { op: "backward", lhs: lv.shape().to_vec(), rhs: vec![] });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        if !node.needs_grad {
            return;
        }
        let nodes = &self.nodes;
        let mut acc = |target: usize, contrib: Vec<f64>| {
            if !nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |i: usize| &nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if nodes[*a].needs_grad {
                    let bt = transpose_raw(bv.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if nodes[*b].needs_grad {
                    let at = transpose_raw(av.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (rows, cols) = node.value.dims2();
                let mut ga = vec![0.0; rows * cols];
                let mut gb = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let k = i * cols + j;
                        let x = av.data()[bidx(av.shape(), i, j)];
                        let y = bv.data()[bidx(bv.shape(), i, j)];
                        let (da, db) = match node.op {
                            Op::Add(..) => (1.0, 1.0),
                            Op::Sub(..) => (1.0, -1.0),
                            Op::Mul(..) => (y, x),
                            _ => (1.0 / y, -x / (y * y)),
                        };
                        ga[k] = g[k] * da;
                        gb[k] = g[k] * db;
                    }
                }
                acc(*a, reduce_to(av.shape(), rows, cols, &ga));
                acc(*b, reduce_to(bv.shape(), rows, cols, &gb));
            }
            Op::Scale(x, k) => acc(*x, g.iter().map(|a| a * k).collect()),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(node.value.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(node.value.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
            ),
            Op::Relu(x) => acc(
                *x,
                g.iter().zip(val(*x).data()).map(|(gi, a)| if *a > 0.0 { *gi } else { 0.0 }).collect(),
            ),
            Op::Softmax { x, lanes } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for l in 0..lanes.count {
                    let dot: f64 = (0..lanes.len).map(|i| {
                        let k = lanes.index(l, i);
                        g[k] * y[k]
                    }).sum();
                    for i in 0..lanes.len {
                        let k = lanes.index(l, i);
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSumExp { x, lanes } => {
                let xv = val(*x).data();
                let out = node.value.data();
                let mut gx = vec![0.0; xv.len()];
                for l in 0..lanes.count {
                    for i in 0..lanes.len {
                        let k = lanes.index(l, i);
                        gx[k] = g[l] * (xv[k] - out[l]).exp();
                    }
                }
                acc(*x, gx);
            }
            Op::MaskedLogSumExp { x, mask } => {
                let xv = val(*x);
                let n = xv.shape()[1];
                let out = node.value.data();
                let mut gx = vec![0.0; xv.len()];
                for (k, gk) in gx.iter_mut().enumerate() {
                    if mask[k] {
                        let i = k / n;
                        *gk = g[i] * (xv.data()[k] - out[i]).exp();
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = val(*gain).len();
                let m = inv_std.len();
                let gw = val(*gain).data();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for i in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let k = i * n + j;
                        gg[j] += g[k] * xhat[k];
                        gbias[j] += g[k];
                        let dh = g[k] * gw[j];
                        s1 += dh;
                        s2 += dh * xhat[k];
                    }
                    for j in 0..n {
                        let k = i * n + j;
                        let dh = g[k] * gw[j];
                        gx[k] = inv_std[i] / n as f64 * (n as f64 * dh - s1 - xhat[k] * s2);
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gbias);
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut gt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                    }
                    offset += chunk;
                    acc(p, gp);
                }
            }
            Op::Slice { x, axis, start, end } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = vec![0.0; val(*x).len()];
                let w = (end - start) * inner;
                for o in 0..outer {
                    let base = o * shape[*axis] * inner + start * inner;
                    gx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                acc(*x, gx);
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                acc(*x, transpose_raw(g, s[0], s[1]));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::SumAxis { x, lanes } => {
                let mut gx = vec![0.0; val(*x).len()];
                for l in 0..lanes.count {
                    for i in 0..lanes.len {
                        gx[lanes.index(l, i)] = g[l];
                    }
                }
                acc(*x, gx);
            }
            Op::RowNormalize { x, sums } => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for (i, &s) in sums.iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        gx[i * n + j] = (g[i * n + j] - dot) / s;
                    }
                }
                acc(*x, gx);
            }
            Op::Bilinear { zh, w, zt } => {
                let (hv, wv, tv) = (val(*zh), val(*w), val(*zt));
                let (p, d, c) = (hv.shape()[0], hv.shape()[1], wv.shape()[0]);
                let mut gh = vec![0.0; p * d];
                let mut gt = vec![0.0; p * d];
                let mut gw = vec![0.0; c * d * d];
                for k in 0..c {
                    let wk = &wv.data()[k * d * d..(k + 1) * d * d];
                    let gwk = &mut gw[k * d * d..(k + 1) * d * d];
                    for q in 0..p {
                        let gq = g[q * c + k];
                        if gq == 0.0 {
                            continue;
                        }
                        let (hq, tq) = (hv.row(q), tv.row(q));
                        for i in 0..d {
                            let wrow = &wk[i * d..(i + 1) * d];
                            let gi = gq * hq[i];
                            let mut dot = 0.0;
                            let grow = &mut gwk[i * d..(i + 1) * d];
                            for j in 0..d {
                                dot += wrow[j] * tq[j];
                                grow[j] += gi * tq[j];
                                gt[q * d + j] += gi * wrow[j];
                            }
                            gh[q * d + i] += gq * dot;
                        }
                    }
                }
                acc(*zh, gh);
                acc(*w, gw);
                acc(*zt, gt);
            }
            Op::BceWithLogits { x, targets } => acc(
                *x,
                val(*x).data().iter().zip(targets).map(|(&a, &y)| g[0] * (sigmoid(a) - y)).collect(),
            ),
            Op::CrossEntropy { x, targets, probs } => {
                let n = val(*x).dims2().1;
                let mut gx: Vec<f64> = probs.iter().map(|p| g[0] * p).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * n + t] -= g[0];
                }
                acc(*x, gx);
            }
        }
    }
}

/// Max-shifted `log Σ exp` of a non-empty sequence.
pub(crate) fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}
