//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable op appends a node to the [`Tape`]; inputs always
//! precede outputs, so [`Tape::backward`] is a single reverse sweep. The
//! tape itself is never mutated by a backward pass, which makes repeated
//! backward calls over the same tape return identical gradients.

use super::array::{gemm, gemm_nt, gemm_tn, NdArray};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SplitLast { src: Var, start: usize },
    Transpose(Var),
    /// The slope is kept from the forward pass when `x` needs a gradient.
    Gelu { x: Var, slope: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &NdArray) -> NdArray {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(like.shape()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_parts(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
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

    /// Records a differentiable input (a parameter or any value whose
    /// gradient is wanted).
    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: NdArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: NdArray, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = NdArray::from_parts_unchecked(vec![m, n], out);
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = NdArray::from_parts_unchecked(va.shape().to_vec(), data);
        self.record(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector (length = last dimension of `x`) to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let vx = self.value(x);
        let vb = self.value(bias).data();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (d, b) in row.iter_mut().zip(vb) {
                *d += b;
            }
        }
        let value = NdArray::from_parts_unchecked(vx.shape().to_vec(), data);
        self.record("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let value = NdArray::from_parts_unchecked(vx.shape().to_vec(), data);
        self.record("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Concatenates 2-D arrays with equal row counts along the last axis.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_lastdim of zero arrays"));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || self.shape(p).len() != 2 {
                return Err(Error::Dimension {
                    op: "concat_lastdim",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = NdArray::from_parts_unchecked(vec![rows, total], data);
        self.record("concat_lastdim", value, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Stacks 2-D arrays with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero arrays"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols || self.shape(p).len() != 2 {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = NdArray::from_parts_unchecked(vec![rows, cols], data);
        self.record("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..start+width` of a 2-D array.
    pub fn split_lastdim(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("split_lastdim", x)?;
        if start + width > cols || width == 0 {
            return Err(Error::Dimension {
                op: "split_lastdim",
                lhs: vec![rows, cols],
                rhs: vec![start, width],
            });
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + width]);
        }
        let value = NdArray::from_parts_unchecked(vec![rows, width], data);
        self.record("split_lastdim", value, Op::SplitLast { src: x, start }, &[x])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose_last2", x)?;
        let vx = self.value(x).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = vx[r * cols + c];
            }
        }
        let value = NdArray::from_parts_unchecked(vec![cols, rows], data);
        self.record("transpose_last2", value, Op::Transpose(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (data, slope) = if self.nodes[x.0].needs_grad {
            vx.data().iter().map(|&v| gelu_parts(v)).unzip()
        } else {
            (vx.data().iter().map(|&v| gelu_parts(v).0).collect(), Vec::new())
        };
        let value = NdArray::from_parts_unchecked(vx.shape().to_vec(), data);
        self.record("gelu", value, Op::Gelu { x, slope }, &[x])
    }

    /// Gathers rows of a 2-D `table`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, h) = self.dims2("embedding_lookup", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "embedding index {bad} out of range for table with {n} rows"
            )));
        }
        let vt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let value = NdArray::from_parts_unchecked(vec![indices.len(), h], data);
        self.record(
            "embedding_lookup",
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record("sum", NdArray::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::contract("mean of an empty array"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.record("mean", NdArray::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.is_empty() {
            return Err(Error::contract("mse of empty arrays"));
        }
        let m = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        self.record("mse", NdArray::scalar(m), Op::Mse(a, b), &[a, b])
    }

    /// Elementwise square root. The derivative at exactly zero is taken as
    /// zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::numeric("sqrt of a negative value"));
        }
        let data = vx.data().iter().map(|v| v.sqrt()).collect();
        let value = NdArray::from_parts_unchecked(vx.shape().to_vec(), data);
        self.record("sqrt", value, Op::Sqrt(x), &[x])
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        if cols == 0 {
            return Err(Error::contract("softmax over an empty last dimension"));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = NdArray::from_parts_unchecked(vx.shape().to_vec(), data);
        self.record("softmax_lastdim", value, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization with affine `gain`/`bias` over the last
    /// dimension; `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = vx.rows();
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, v) in normalized[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = normalized.clone();
        for row in data.chunks_mut(cols) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let value = NdArray::from_parts_unchecked(vx.shape().to_vec(), data);
        self.record(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<NdArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(NdArray::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *g = None;
            } else if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<NdArray>], v: Var, g: NdArray) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Like [`Self::accumulate`] but clones `g` only when the slot is empty.
    fn accumulate_ref(&self, grads: &mut [Option<NdArray>], v: Var, g: &NdArray) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    fn propagate(&self, op: &Op, out: &NdArray, g: &NdArray, grads: &mut [Option<NdArray>]) -> Result<()> {
        let like = |v: Var, data: Vec<f64>| NdArray::from_parts_unchecked(self.shape(v).to_vec(), data);
        match op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let ga = gemm_nt(g.data(), vb.data(), m, n, k);
                    self.accumulate(grads, *a, like(*a, ga));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = gemm_tn(va.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate_ref(grads, *a, g);
                self.accumulate_ref(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_ref(grads, *a, g);
                let neg = g.data().iter().map(|v| -v).collect();
                self.accumulate(grads, *b, like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, like(*a, ga));
                self.accumulate(grads, *b, like(*b, gb));
            }
            Op::AddBias(x, bias) => {
                self.accumulate_ref(grads, *x, g);
                let cols = g.cols();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *bias, like(*bias, gb));
            }
            Op::Scale(x, f) => {
                let gx = g.data().iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::ConcatLast(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, like(p, gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, p, like(p, g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SplitLast { src, start } => {
                if !self.nodes[src.0].needs_grad {
                    return Ok(());
                }
                // Added in place: a zeroed full-width gradient per slice
                // dominated the backward pass.
                let cols = self.value(*src).cols();
                let w = g.cols();
                let gs = grads[src.0].get_or_insert_with(|| NdArray::zeros(self.shape(*src)));
                for (dst, row) in gs.data_mut().chunks_mut(cols).zip(g.data().chunks(w)) {
                    for (d, v) in dst[*start..start + w].iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[c * rows + r] = g.data()[r * cols + c];
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Gelu { x, slope } => {
                let gx = slope
                    .iter()
                    .zip(g.data())
                    .map(|(d, gv)| d * gv)
                    .collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Embedding { table, indices } => {
                let h = g.cols();
                let mut gt = vec![0.0; self.value(*table).len()];
                for (row, &i) in g.data().chunks(h).zip(indices) {
                    for (acc, v) in gt[i * h..(i + 1) * h].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *table, like(*table, gt));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, NdArray::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, NdArray::full(self.shape(*x), g.data()[0] / n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g.data()[0] / va.len() as f64;
                let ga: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, like(*a, ga));
                self.accumulate(grads, *b, like(*b, gb));
            }
            Op::Sqrt(x) => {
                let gx = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, gv)| if y > 0.0 { 0.5 * gv / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let mut gx = vec![0.0; out.len()];
                for ((yr, gr), dr) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for ((d, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = out.cols();
                let n = cols as f64;
                let gvals = self.value(*gain).data();
                let mut gx = vec![0.0; out.len()];
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let xh = &normalized[r * cols..(r + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        let d = gr[c] * gvals[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                        ggain[c] += gr[c] * xh[c];
                        gbias[c] += gr[c];
                    }
                    for c in 0..cols {
                        let d = gr[c] * gvals[c];
                        gx[r * cols + c] = inv / n * (n * d - sum_d - xh[c] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
                self.accumulate(grads, *gain, like(*gain, ggain));
                self.accumulate(grads, *bias, like(*bias, gbias));
            }
        }
        Ok(())
    }
}
