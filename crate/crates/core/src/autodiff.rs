//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order. Nodes are referred
//! to by [`Var`] handles; [`Graph::backward`] walks the tape once in reverse and
//! accumulates `dLoss/dLeaf` into every leaf created with `requires_grad`.
//!
//! All tensors are treated as matrices (`rows x cols`); a vector is `1 x n`.
//! Apart from [`Graph::add_row_bias`] and the explicit broadcast ops there is no
//! implicit broadcasting.

use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Default ceiling applied to logits before exponentiation.
pub const EXP_CEILING: f64 = 10.0;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    Exp { x: Var, ceiling: f64 },
    Log(Var),
    Gelu(Var),
    Digamma(Var),
    Lgamma(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    SumRows(Var),
    MeanSegments { x: Var, segment: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    heads: usize,
    batch: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation, in topological (= recording) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`.
fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T (k x m)^T * b` where `a` is `m x k` and `b` is `m x n`; result `k x n`.
fn matmul_at_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
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

fn masked_softmax_in_place(row: &mut [f64], mask: &[bool]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        *v = if m { 0.0 } else { (*v - max).exp() };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *dst = Some(delta.to_vec()),
    }
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

    /// Registers an input. Its gradient is tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable input (`requires_grad = true`).
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor.with_requires_grad(false),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Every leaf that can receive a gradient, in recording order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(name, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, data)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(Error::dim("matmul_bt", ta.shape(), tb.shape()));
        }
        let data = matmul_bt_kernel(ta.data(), tb.data(), m, k, n);
        self.push("matmul_bt", Tensor::matrix(m, n, data)?, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let data = transpose_kernel(t.data(), r, c);
        self.push("transpose", Tensor::matrix(c, r, data)?, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    /// Adds a `1 x c` bias to every row of an `r x c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = dims(tx);
        if tb.numel() != c {
            return Err(Error::dim("add_row_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        self.push("add_row_bias", Tensor::matrix(r, c, data)?, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Repeats an `r x 1` column across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 {
            return Err(Error::dim("broadcast_cols", t.shape(), &[t.rows(), 1]));
        }
        let r = t.rows();
        let data = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        self.push("broadcast_cols", Tensor::matrix(r, cols, data)?, Op::BroadcastCols(x), &[x])
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != 1 {
            return Err(Error::dim("broadcast_rows", t.shape(), &[1, t.cols()]));
        }
        let c = t.cols();
        let data = t.data().repeat(rows);
        self.push("broadcast_rows", Tensor::matrix(rows, c, data)?, Op::BroadcastRows(x), &[x])
    }

    /// Elementwise `exp(min(x, ceiling))`; strictly positive output.
    pub fn exp_activation(&mut self, x: Var, ceiling: f64) -> Result<Var> {
        self.unary("exp_activation", x, |v| v.min(ceiling).exp(), Op::Exp { x, ceiling })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        self.check_positive("digamma", x)?;
        self.unary("digamma", x, digamma_unchecked, Op::Digamma(x))
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.check_positive("lgamma", x)?;
        self.unary("lgamma", x, lgamma_unchecked, Op::Lgamma(x))
    }

    fn check_positive(&self, name: &str, x: Var) -> Result<()> {
        match self.value(x).data().iter().find(|&&v| v <= 0.0) {
            Some(bad) => Err(Error::Domain(format!("{name} requires x > 0, got {bad}"))),
            None => Ok(()),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::InvalidInput("softmax of an empty tensor".into()));
        }
        let (r, c) = dims(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", Tensor::matrix(r, c, data)?, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise softmax where entries flagged in `mask` are forced to zero.
    /// Every row needs at least one unmasked entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if mask.len() != t.numel() {
            return Err(Error::dim("masked_softmax_rows", t.shape(), &[mask.len()]));
        }
        if t.numel() == 0 || mask.chunks(c).any(|m| m.iter().all(|&v| v)) {
            return Err(Error::InvalidInput("masked softmax row has no open entry".into()));
        }
        let mut data = t.data().to_vec();
        for (row, m) in data.chunks_mut(c).zip(mask.chunks(c)) {
            masked_softmax_in_place(row, m);
        }
        self.push("masked_softmax_rows", Tensor::matrix(r, c, data)?, Op::MaskedSoftmaxRows(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push("layer_norm_rows", Tensor::matrix(r, c, data)?, Op::LayerNormRows { x, inv_std }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// `r x c` to `r x 1`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let data = t.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        self.push("sum_rows", Tensor::matrix(r, 1, data)?, Op::SumRows(x), &[x])
    }

    /// Averages consecutive groups of `segment` rows: `(B*segment) x c` to `B x c`.
    pub fn mean_segments(&mut self, x: Var, segment: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if segment == 0 || r % segment != 0 {
            return Err(Error::dim("mean_segments", t.shape(), &[segment]));
        }
        let groups = r / segment;
        let mut data = vec![0.0; groups * c];
        for (i, row) in t.data().chunks(c).enumerate() {
            let out = &mut data[(i / segment) * c..(i / segment + 1) * c];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / segment as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        self.push("mean_segments", Tensor::matrix(groups, c, data)?, Op::MeanSegments { x, segment }, &[x])
    }

    /// Stacks matrices vertically. Inputs with zero rows are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            if t.numel() > 0 {
                rows += t.rows();
            }
            data.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        self.push("concat_cols", Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if start + len > c {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let data = if len == 0 {
            Vec::new()
        } else {
            t.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect()
        };
        self.push("slice_cols", Tensor::matrix(r, len, data)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if start + len > r {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::matrix(len, c, data)?, Op::SliceRows { x, start }, &[x])
    }

    /// Output row `i` is input row `indices[i]`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            x,
            indices: indices.to_vec(),
        };
        self.push("gather_rows", Tensor::matrix(indices.len(), c, data)?, op, &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != rows * cols {
            return Err(Error::dim("reshape", t.shape(), &[rows, cols]));
        }
        let value = Tensor::matrix(rows, cols, t.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Batched multi-head scaled dot-product attention with an optional key/value
    /// prefix shared by every instance.
    ///
    /// `q` is `(batch * nq) x m`; `k` and `v` are `(batch * nk) x m`; the prefix
    /// pair is `p x m` each. For every instance and head the keys are
    /// `[prefix_k; k_i]`, the values `[prefix_v; v_i]`, and scores are scaled by
    /// `1/sqrt(m / heads)`. Output has the shape of `q`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        heads: usize,
        batch: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let m = tq.cols();
        if tk.cols() != m || tv.cols() != m {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        if tk.shape() != tv.shape() {
            return Err(Error::dim("attention", tk.shape(), tv.shape()));
        }
        if heads == 0 || m % heads != 0 || batch == 0 || tq.rows() % batch != 0 || tk.rows() % batch != 0 {
            return Err(Error::InvalidInput(format!(
                "attention: width {m}, heads {heads}, batch {batch}, rows {}/{}",
                tq.rows(),
                tk.rows()
            )));
        }
        let (p_rows, pk, pv) = match prefix {
            Some((pk, pv)) => {
                let (tpk, tpv) = (self.value(pk), self.value(pv));
                if tpk.shape() != tpv.shape() {
                    return Err(Error::dim("attention prefix", tpk.shape(), tpv.shape()));
                }
                if tpk.numel() > 0 && tpk.cols() != m {
                    return Err(Error::dim("attention prefix", tpk.shape(), tq.shape()));
                }
                let rows = if tpk.numel() == 0 { 0 } else { tpk.rows() };
                (rows, tpk.data(), tpv.data())
            }
            None => (0, &[][..], &[][..]),
        };
        let nq = tq.rows() / batch;
        let nk = tk.rows() / batch;
        let dh = m / heads;
        let len = p_rows + nk;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let key_row = |i: usize, l: usize| -> &[f64] {
            if l < p_rows {
                &pk[l * m..(l + 1) * m]
            } else {
                let r = i * nk + l - p_rows;
                &kd[r * m..(r + 1) * m]
            }
        };
        let value_row = |i: usize, l: usize| -> &[f64] {
            if l < p_rows {
                &pv[l * m..(l + 1) * m]
            } else {
                let r = i * nk + l - p_rows;
                &vd[r * m..(r + 1) * m]
            }
        };

        let mut out = vec![0.0; tq.numel()];
        let mut probs = vec![0.0; batch * heads * nq * len];
        let mut scores = vec![0.0; len];
        for i in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for r in 0..nq {
                    let qrow = &qd[(i * nq + r) * m..(i * nq + r + 1) * m][cols.clone()];
                    for (l, s) in scores.iter_mut().enumerate() {
                        let krow = &key_row(i, l)[cols.clone()];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *s = dot * inv_sqrt;
                    }
                    softmax_in_place(&mut scores);
                    let base = ((i * heads + h) * nq + r) * len;
                    probs[base..base + len].copy_from_slice(&scores);
                    let orow = &mut out[(i * nq + r) * m..(i * nq + r + 1) * m][cols.clone()];
                    for (l, &a) in scores.iter().enumerate() {
                        let vrow = &value_row(i, l)[cols.clone()];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        let shape = tq.shape().to_vec();
        let mut inputs = vec![q, k, v];
        if let Some((a, b)) = prefix {
            inputs.extend([a, b]);
        }
        let record = AttentionRecord {
            q,
            k,
            v,
            prefix,
            heads,
            batch,
            probs,
        };
        self.push("attention", Tensor::new(shape, out)?, Op::Attention(Box::new(record)), &inputs)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&dy);
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, delta: &[f64]| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut adj[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ((m, k), (_, n)) = (dims(ta), dims(tb));
                if wants(a) {
                    send(a, &matmul_bt_kernel(dy, tb.data(), m, n, k));
                }
                if wants(b) {
                    send(b, &matmul_at_kernel(ta.data(), dy, m, k, n));
                }
            }
            &Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ((m, k), (n, _)) = (dims(ta), dims(tb));
                if wants(a) {
                    send(a, &matmul_kernel(dy, tb.data(), m, n, k));
                }
                if wants(b) {
                    send(b, &matmul_at_kernel(dy, ta.data(), m, n, k));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = dims(val(x));
                send(x, &transpose_kernel(dy, c, r));
            }
            &Op::Add(a, b) => {
                send(a, dy);
                send(b, dy);
            }
            &Op::Sub(a, b) => {
                send(a, dy);
                let neg: Vec<f64> = dy.iter().map(|d| -d).collect();
                send(b, &neg);
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = dy.iter().zip(val(b).data()).map(|(d, y)| d * y).collect();
                    send(a, &d);
                }
                if wants(b) {
                    let d: Vec<f64> = dy.iter().zip(val(a).data()).map(|(d, x)| d * x).collect();
                    send(b, &d);
                }
            }
            &Op::Scale(x, s) => {
                let d: Vec<f64> = dy.iter().map(|d| d * s).collect();
                send(x, &d);
            }
            &Op::AddScalar(x) => send(x, dy),
            &Op::AddRowBias(x, bias) => {
                send(x, dy);
                if wants(bias) {
                    let c = val(x).cols();
                    let mut db = vec![0.0; c];
                    for row in dy.chunks(c) {
                        for (b, d) in db.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                    send(bias, &db);
                }
            }
            &Op::BroadcastCols(x) => {
                let c = node.value.cols();
                let d: Vec<f64> = dy.chunks(c).map(|row| row.iter().sum()).collect();
                send(x, &d);
            }
            &Op::BroadcastRows(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; c];
                for row in dy.chunks(c) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                send(x, &d);
            }
            &Op::Exp { x, ceiling } => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(y)
                    .zip(val(x).data())
                    .map(|((d, y), &xv)| if xv <= ceiling { d * y } else { 0.0 })
                    .collect();
                send(x, &d);
            }
            &Op::Log(x) => {
                let d: Vec<f64> = dy.iter().zip(val(x).data()).map(|(d, x)| d / x).collect();
                send(x, &d);
            }
            &Op::Gelu(x) => {
                let d: Vec<f64> = dy.iter().zip(val(x).data()).map(|(d, &x)| d * gelu_grad(x)).collect();
                send(x, &d);
            }
            &Op::Digamma(x) => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(val(x).data())
                    .map(|(d, &x)| d * trigamma_unchecked(x))
                    .collect();
                send(x, &d);
            }
            &Op::Lgamma(x) => {
                let d: Vec<f64> = dy
                    .iter()
                    .zip(val(x).data())
                    .map(|(d, &x)| d * digamma_unchecked(x))
                    .collect();
                send(x, &d);
            }
            &Op::SoftmaxRows(x) | &Op::MaskedSoftmaxRows(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; dy.len()];
                for ((drow, yrow), out) in dy.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, dv), yv) in out.iter_mut().zip(drow).zip(yrow) {
                        *o = yv * (dv - dot);
                    }
                }
                send(x, &d);
            }
            Op::LayerNormRows { x, inv_std } => {
                let c = node.value.cols();
                let mut d = vec![0.0; dy.len()];
                for (((drow, yrow), out), s) in dy.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)).zip(inv_std) {
                    let mean_d = drow.iter().sum::<f64>() / c as f64;
                    let mean_dy = drow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, dv), yv) in out.iter_mut().zip(drow).zip(yrow) {
                        *o = s * (dv - mean_d - yv * mean_dy);
                    }
                }
                send(*x, &d);
            }
            &Op::Sum(x) => {
                let d = vec![dy[0]; val(x).numel()];
                send(x, &d);
            }
            &Op::SumRows(x) => {
                let c = val(x).cols();
                let d: Vec<f64> = dy.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
                send(x, &d);
            }
            &Op::MeanSegments { x, segment } => {
                let c = node.value.cols();
                let inv = 1.0 / segment as f64;
                let rows = val(x).rows();
                let mut d = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    d.extend(dy[(r / segment) * c..(r / segment + 1) * c].iter().map(|g| g * inv));
                }
                send(x, &d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    send(p, &dy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let d: Vec<f64> = dy.chunks(total).flat_map(|row| row[col..col + c].iter().copied()).collect();
                        send(p, &d);
                    }
                    col += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = dims(val(x));
                let len = node.value.cols();
                let mut d = vec![0.0; r * c];
                if len > 0 {
                    for (row, drow) in d.chunks_mut(c).zip(dy.chunks(len)) {
                        row[start..start + len].copy_from_slice(drow);
                    }
                }
                send(x, &d);
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = dims(val(x));
                let mut d = vec![0.0; val(x).numel()];
                d[start * c..start * c + dy.len()].copy_from_slice(dy);
                send(x, &d);
            }
            Op::GatherRows { x, indices } => {
                let (_, c) = dims(val(*x));
                let mut d = vec![0.0; val(*x).numel()];
                for (drow, &i) in dy.chunks(c).zip(indices) {
                    for (a, b) in d[i * c..(i + 1) * c].iter_mut().zip(drow) {
                        *a += b;
                    }
                }
                send(*x, &d);
            }
            &Op::Reshape(x) => send(x, dy),
            Op::Attention(rec) => {
                let grads = self.attention_backward(rec, dy);
                send(rec.q, &grads[0]);
                send(rec.k, &grads[1]);
                send(rec.v, &grads[2]);
                if let Some((pk, pv)) = rec.prefix {
                    send(pk, &grads[3]);
                    send(pv, &grads[4]);
                }
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, dy: &[f64]) -> [Vec<f64>; 5] {
        let val = |v: Var| &self.nodes[v.0].value;
        let (tq, tk, tv) = (val(rec.q), val(rec.k), val(rec.v));
        let m = tq.cols();
        let (batch, heads) = (rec.batch, rec.heads);
        let (pk, pv, p_rows) = match rec.prefix {
            Some((a, b)) if val(a).numel() > 0 => (val(a).data(), val(b).data(), val(a).rows()),
            _ => (&[][..], &[][..], 0),
        };
        let nq = tq.rows() / batch;
        let nk = tk.rows() / batch;
        let dh = m / heads;
        let len = p_rows + nk;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());

        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dpk = vec![0.0; pk.len()];
        let mut dpv = vec![0.0; pv.len()];
        let mut da = vec![0.0; len];

        for i in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for r in 0..nq {
                    let qi = (i * nq + r) * m + c0;
                    let base = ((i * heads + h) * nq + r) * len;
                    let probs = &rec.probs[base..base + len];
                    let go = &dy[qi..qi + dh];
                    // dA and dV
                    for l in 0..len {
                        let (vrow, dvrow) = if l < p_rows {
                            (&pv[l * m + c0..l * m + c0 + dh], &mut dpv[l * m + c0..l * m + c0 + dh])
                        } else {
                            let rr = (i * nk + l - p_rows) * m + c0;
                            (&vd[rr..rr + dh], &mut dv[rr..rr + dh])
                        };
                        da[l] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        for (d, g) in dvrow.iter_mut().zip(go) {
                            *d += probs[l] * g;
                        }
                    }
                    let dot: f64 = da.iter().zip(probs).map(|(a, b)| a * b).sum();
                    for l in 0..len {
                        let ds = probs[l] * (da[l] - dot) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let (krow, dkrow) = if l < p_rows {
                            (&pk[l * m + c0..l * m + c0 + dh], &mut dpk[l * m + c0..l * m + c0 + dh])
                        } else {
                            let rr = (i * nk + l - p_rows) * m + c0;
                            (&kd[rr..rr + dh], &mut dk[rr..rr + dh])
                        };
                        let qrow = &qd[qi..qi + dh];
                        for c in 0..dh {
                            dq[qi + c] += ds * krow[c];
                            dkrow[c] += ds * qrow[c];
                        }
                    }
                }
            }
        }
        [dq, dk, dv, dpk, dpv]
    }
}
