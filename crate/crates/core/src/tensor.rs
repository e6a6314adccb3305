//! Dense row-major tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value (shape + contiguous data). Differentiation
//! happens on a [`Tape`]: leaves are registered with [`Tape::param`] (tracks
//! gradient) or [`Tape::constant`] (does not), every op appends a node, and
//! [`Tape::backward`] walks the nodes once in reverse. Nodes only compute
//! gradients when some ancestor requires them, so a frozen backbone costs a
//! forward pass and nothing more.
//!
//! Row-wise ops (`softmax`, `layer_norm`, `cross_entropy`) act on the last
//! axis; a 1-D tensor is one row.

use std::borrow::Cow;
use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floating-point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Lossy literal conversion.
    fn of(v: f64) -> Self;

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
}

/// Additive bias used to exclude masked positions from a softmax.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` rows; convenient for tests and fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| F::of(v)).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::of(rng.normal() * std)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Length of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows along the last axis.
    pub fn n_rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Little-endian bytes of the data as 32-bit floats.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|v| (v.f64() as f32).to_le_bytes())
            .collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<F>,
        inv_std: Vec<F>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Topological order holds by construction: a node can only reference
/// [`Var`]s that already exist. `backward` may run once per tape.
pub struct Tape<'a, F: Scalar = f32> {
    nodes: Vec<Node<'a, F>>,
    grads: Option<Vec<Option<Tensor<F>>>>,
}

impl<F: Scalar> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Borrowed leaf without gradient.
    pub fn constant(&mut self, t: &'a Tensor<F>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.leaf(Cow::Owned(t), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.val(v).shape();
        match *s {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, s, &[])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.matrix_dims(a, "matmul")?;
        let (q2, s) = self.matrix_dims(b, "matmul")?;
        if q != q2 {
            return Err(Error::dim("matmul", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![F::zero(); p * s];
        matmul_into(self.val(a).data(), self.val(b).data(), &mut out, p, q, s);
        Ok(self.push(Tensor { shape: vec![p, s], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.val(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F, node: Op<F>) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `row` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.val(x), self.val(row));
        let c = tx.last_dim();
        if tr.numel() != c {
            return Err(Error::dim("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let t = self.val(x).map(|v| v * k);
        self.push(t, Op::Scale(x, k), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.val(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    /// Stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if !tx.is_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let c = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x), &[x]))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps) * gain + bias` (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let c = tx.last_dim();
        if tg.numel() != c {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        if tb.numel() != c {
            return Err(Error::dim("layer_norm", tx.shape(), tb.shape()));
        }
        let eps = F::of(eps);
        let n = F::of(c as f64);
        let mut normed = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.n_rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normed.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Per-column maximum over the rows of an `l×d` matrix whose mask entry is
    /// true. Returns a length-`d` vector; ties resolve to the lowest row.
    pub fn max_pool_seq(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (l, d) = self.matrix_dims(x, "max_pool_seq")?;
        if mask.len() != l {
            return Err(Error::dim("max_pool_seq", &[l, d], &[mask.len()]));
        }
        let first = mask.iter().position(|&m| m).ok_or(Error::EmptyPool)?;
        let src = self.val(x).data();
        let mut argmax = vec![first; d];
        let mut best: Vec<F> = src[first * d..(first + 1) * d].to_vec();
        for i in (first + 1)..l {
            if !mask[i] {
                continue;
            }
            for j in 0..d {
                let v = src[i * d + j];
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Tensor::vector(best), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`n×V`), skipping positions equal to `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", &[n, v], &[targets.len()]));
        }
        let tl = self.val(logits);
        if !tl.is_finite() {
            return Err(Error::Numeric("cross_entropy logits".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut kept = Vec::with_capacity(n);
        let mut total = F::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                kept.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::Vocabulary { token: t, vocab_size: v });
            }
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            total = total + lse - row[t];
            softmax_in_place(row);
            kept.push(Some(t));
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let loss = total / F::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Data("concat_rows of nothing".into()))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.val(first).shape(), self.val(p).shape()));
            }
            rows += r;
            data.extend_from_slice(self.val(p).data());
        }
        Ok(self.push(Tensor { shape: vec![rows, c], data }, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Data("concat_cols of nothing".into()))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.val(first).shape(), self.val(p).shape()));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.val(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor { shape: vec![len, c], data }, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { x, start }, &[x]))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Vocabulary { token: id, vocab_size: r });
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", &[r, c], &[0]));
        }
        Ok(self.push(
            Tensor { shape: vec![ids.len(), c], data },
            Op::GatherRows { x, ids: ids.to_vec() },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let m = t.sum() / F::of(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean of several scalar nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let stacked = xs
            .iter()
            .map(|&x| self.reshape(x, &[1, 1]))
            .collect::<Result<Vec<_>>>()?;
        let col = self.concat_rows(&stacked)?;
        Ok(self.mean(col))
    }

    /// Reverse pass from a scalar `loss`. Every node that requires a gradient
    /// ends up with one (zeros if it did not influence `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let shape = node.value.shape().to_vec();
                    match g {
                        Some(data) => Tensor { shape, data },
                        None => Tensor::zeros(&shape),
                    }
                })
            })
            .collect();
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass; `None` for constant nodes or
    /// before `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (p, q) = (ta.shape()[0], ta.shape()[1]);
                let s = tb.shape()[1];
                if wants(*a) {
                    // dA = G · Bᵀ
                    let acc = slot(grads, *a, p * q);
                    for i in 0..p {
                        let gi = &g[i * s..(i + 1) * s];
                        for k in 0..q {
                            let bk = &tb.data()[k * s..(k + 1) * s];
                            acc[i * q + k] = acc[i * q + k] + dot(gi, bk);
                        }
                    }
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let acc = slot(grads, *b, q * s);
                    for i in 0..p {
                        let gi = &g[i * s..(i + 1) * s];
                        for k in 0..q {
                            let aik = ta.data()[i * q + k];
                            if aik == F::zero() {
                                continue;
                            }
                            axpy(&mut acc[k * s..(k + 1) * s], aik, gi);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let acc = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        acc[i * c + j] = acc[i * c + j] + g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) | Op::Scale(a, _) => {
                let k = match node.op {
                    Op::Scale(_, k) => k,
                    _ => F::one(),
                };
                let acc = slot(grads, *a, g.len());
                for (r, &gv) in acc.iter_mut().zip(g) {
                    *r = *r + k * gv;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g, F::one());
                }
                if wants(*b) {
                    add_into(slot(grads, *b, g.len()), g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                if wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * tb[i];
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g, F::one());
                }
                if wants(*row) {
                    let c = self.val(*row).numel();
                    let acc = slot(grads, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(acc, chunk, F::one());
                    }
                }
            }
            Op::Silu(x) => {
                let tx = self.val(*x).data();
                let acc = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(tx[i]);
                    acc[i] = acc[i] + g[i] * s * (F::one() + tx[i] * (F::one() - s));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let acc = slot(grads, *x, g.len());
                for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let inner = dot(yr, gr);
                    for j in 0..c {
                        acc[r * c + j] = acc[r * c + j] + yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gn = self.val(*gain).data();
                if wants(*gain) {
                    let acc = slot(grads, *gain, c);
                    for (hr, gr) in normed.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            acc[j] = acc[j] + gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, c);
                    for gr in g.chunks(c) {
                        add_into(acc, gr, F::one());
                    }
                }
                if wants(*x) {
                    let n = F::of(c as f64);
                    let acc = slot(grads, *x, g.len());
                    let mut dh = vec![F::zero(); c];
                    for (r, (hr, gr)) in normed.chunks(c).zip(g.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gn[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / n;
                        let mean_dh_h = dot(&dh, hr) / n;
                        for j in 0..c {
                            let d = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            acc[r * c + j] = acc[r * c + j] + d;
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let d = argmax.len();
                let n = self.val(*x).numel();
                let acc = slot(grads, *x, n);
                for (j, &i) in argmax.iter().enumerate() {
                    acc[i * d + j] = acc[i * d + j] + g[j];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.val(*logits).last_dim();
                let k = g[0] / F::of(*count as f64);
                let acc = slot(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        acc[i * v + j] = acc[i * v + j] + k * (probs[i * v + j] - onehot);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).numel();
                    if wants(*p) {
                        add_into(slot(grads, *p, n), &g[offset..offset + n], F::one());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.value.last_dim();
                let mut col = 0;
                for p in parts {
                    let (r, w) = (self.val(*p).shape()[0], self.val(*p).shape()[1]);
                    if wants(*p) {
                        let acc = slot(grads, *p, r * w);
                        for i in 0..r {
                            add_into(&mut acc[i * w..(i + 1) * w], &g[i * c + col..i * c + col + w], F::one());
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                let n = self.val(*x).numel();
                let acc = slot(grads, *x, n);
                add_into(&mut acc[start * c..start * c + g.len()], g, F::one());
            }
            Op::SliceCols { x, start } => {
                let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.val(*x).last_dim();
                let acc = slot(grads, *x, r * c);
                for i in 0..r {
                    add_into(&mut acc[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], F::one());
                }
            }
            Op::GatherRows { x, ids } => {
                let c = node.value.last_dim();
                let n = self.val(*x).numel();
                let acc = slot(grads, *x, n);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * c..(id + 1) * c], &g[i * c..(i + 1) * c], F::one());
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.val(*x).numel();
                let k = match node.op {
                    Op::Mean(_) => g[0] / F::of(n as f64),
                    _ => g[0],
                };
                for r in slot(grads, *x, n).iter_mut() {
                    *r = *r + k;
                }
            }
        }
    }
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, n: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

fn add_into<F: Scalar>(acc: &mut [F], g: &[F], k: F) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + k * b;
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(F::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().copied().fold(tail, |s, v| s + v)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `out += a (p×q) · b (q×s)`.
fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let row = &mut out[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == F::zero() {
                continue;
            }
            axpy(row, aik, &b[k * s..(k + 1) * s]);
        }
    }
}

/// `y += a·x` over equal-length slices.
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    let n = y.len().min(x.len());
    let (y, x) = (&mut y[..n], &x[..n]);
    let mut yc = y.chunks_exact_mut(8);
    let mut xc = x.chunks_exact(8);
    for (yy, xx) in (&mut yc).zip(&mut xc) {
        for k in 0..8 {
            yy[k] = yy[k] + a * xx[k];
        }
    }
    for (yy, &xx) in yc.into_remainder().iter_mut().zip(xc.remainder()) {
        *yy = *yy + a * xx;
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::{check, random};
    use super::*;

    fn run(f: impl FnOnce(&mut Tape<'_, f64>) -> Result<Var>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape).unwrap();
        tape.value(out).clone()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let out = run(|t| {
            let a = t.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?, false);
            let b = t.input(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]])?, false);
            t.matmul(a, b)
        });
        assert_eq!(out.data(), &[3.0, 4.0, 5.0, 6.0]);
        let out = run(|t| {
            let a = t.input(Tensor::from_rows(&[vec![1.0, 2.0]])?, false);
            let b = t.input(Tensor::from_rows(&[vec![3.0], vec![4.0]])?, false);
            t.matmul(a, b)
        });
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::zeros(&[2, 3]), false);
        let b = t.input(Tensor::zeros(&[2, 3]), false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let inputs = [random(&[4, 5], seed), random(&[5, 3], seed + 100)];
            for which in 0..2 {
                let err = check(&inputs, which, 1e-5, &|t, v| {
                    let c = t.matmul(v[0], v[1])?;
                    Ok(t.sum(c))
                });
                assert!(err < 1e-4, "seed {seed} input {which}: {err}");
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let out = run(|t| {
            let x = t.input(Tensor::vector(vec![0.0; 3]), false);
            t.softmax(x)
        });
        assert!(close(out.data(), &[1.0 / 3.0; 3], 1e-12));
        for c in [-50.0, 0.0, 3.7, 400.0] {
            let out = run(|t| {
                let x = t.input(Tensor::vector(vec![c, c + 3f64.ln()]), false);
                t.softmax(x)
            });
            assert!(close(out.data(), &[0.25, 0.75], 1e-9), "{c}: {:?}", out.data());
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::vector(vec![0.0, f64::NAN]), false);
        assert!(matches!(t.softmax(x), Err(Error::Numeric(_))));
        let y = t.input(Tensor::vector(vec![0.0, f64::INFINITY]), false);
        assert!(matches!(t.softmax(y), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let inputs = [random(&[7], seed), random(&[7], seed + 50)];
            // Weighted sum so the gradient is not identically zero.
            let err = check(&inputs, 0, 1e-5, &|t, v| {
                let s = t.softmax(v[0])?;
                let w = t.mul(s, v[1])?;
                Ok(t.sum(w))
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    fn ln_fn(eps: f64) -> impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> {
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], eps)?;
            let w = t.mul(y, v[3])?;
            Ok(t.sum(w))
        }
    }

    #[test]
    fn layer_norm_closed_forms() {
        let ones = Tensor::vector(vec![1.0; 3]);
        let zeros = Tensor::vector(vec![0.0; 3]);
        let out = run(|t| {
            let x = t.input(Tensor::vector(vec![1.0, 1.0, 1.0]), false);
            let g = t.input(ones.clone(), false);
            let b = t.input(zeros.clone(), false);
            t.layer_norm(x, g, b, 1e-6)
        });
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
        let out = run(|t| {
            let x = t.input(Tensor::vector(vec![-1.0, 1.0]), false);
            let g = t.input(Tensor::vector(vec![1.0; 2]), false);
            let b = t.input(Tensor::vector(vec![0.0; 2]), false);
            t.layer_norm(x, g, b, 1e-12)
        });
        assert!(close(out.data(), &[-1.0, 1.0], 1e-9));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = random(&[16], 3);
        let out = run(|t| {
            let x = t.input(x.clone(), false);
            let g = t.input(Tensor::vector(vec![1.0; 16]), false);
            let b = t.input(Tensor::vector(vec![0.0; 16]), false);
            t.layer_norm(x, g, b, 1e-6)
        });
        let mean = out.sum() / 16.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        for seed in 0..20 {
            let inputs = [
                random(&[3, 6], seed),
                random(&[6], seed + 1000),
                random(&[6], seed + 2000),
                random(&[3, 6], seed + 3000),
            ];
            for which in 0..3 {
                let err = check(&inputs, which, 1e-5, &ln_fn(1e-6));
                assert!(err < 1e-4, "seed {seed} input {which}: {err}");
            }
        }
    }

    #[test]
    fn silu_values_and_gradient() {
        let out = run(|t| {
            let x = t.input(Tensor::vector(vec![0.0, 40.0, -40.0]), false);
            Ok(t.silu(x))
        });
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 40.0).abs() < 1e-9);
        assert!(out.data()[2].abs() < 1e-9);
        let inputs = [Tensor::vector(vec![-2.0, -0.5, 0.3, 4.0])];
        let err = check(&inputs, 0, 1e-5, &|t, v| {
            let y = t.silu(v[0]);
            Ok(t.sum(y))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn max_pool_respects_mask_and_routes_gradient() {
        let out = run(|t| {
            let x = t.input(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]])?, false);
            t.max_pool_seq(x, &[true, true])
        });
        assert_eq!(out.data(), &[3.0, 5.0]);
        let out = run(|t| {
            let x = t.input(Tensor::from_rows(&[vec![1.0, 5.0], vec![9.0, 9.0]])?, false);
            t.max_pool_seq(x, &[true, false])
        });
        assert_eq!(out.data(), &[1.0, 5.0]);

        // Brute-force subgradient: 1 at the first column argmax, 0 elsewhere.
        let x = Tensor::from_rows(&[vec![1.0, 7.0, 2.0], vec![4.0, 7.0, 0.0], vec![4.0, 1.0, -3.0]]).unwrap();
        let mut t = Tape::<f64>::new();
        let xv = t.input(x.clone(), true);
        let p = t.max_pool_seq(xv, &[true; 3]).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        let mut expected = vec![0.0; 9];
        for j in 0..3 {
            let mut best = 0;
            for i in 1..3 {
                if x.data()[i * 3 + j] > x.data()[best * 3 + j] {
                    best = i;
                }
            }
            expected[best * 3 + j] = 1.0;
        }
        assert_eq!(t.grad(xv).unwrap().data(), &expected[..]);
    }

    #[test]
    fn max_pool_all_masked_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::zeros(&[2, 2]), false);
        assert!(matches!(t.max_pool_seq(x, &[false, false]), Err(Error::EmptyPool)));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let out = run(|t| {
            let x = t.input(Tensor::zeros(&[2, 4]), false);
            t.cross_entropy(x, &[1, 3], None)
        });
        assert!((out.item() - 4f64.ln()).abs() < 1e-12);
        let out = run(|t| {
            let x = t.input(Tensor::from_rows(&[vec![0.0, 80.0, 0.0]])?, false);
            t.cross_entropy(x, &[1], None)
        });
        assert!(out.item() < 1e-30);
    }

    #[test]
    fn cross_entropy_ignores_and_rejects_degenerate() {
        let out = run(|t| {
            let x = t.input(Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, -5.0]])?, false);
            t.cross_entropy(x, &[0, 9], Some(9))
        });
        assert!((out.item() - 2f64.ln()).abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(t.cross_entropy(x, &[0, 0], Some(0)), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let inputs = [random(&[3, 5], seed)];
            let err = check(&inputs, 0, 1e-5, &|t, v| t.cross_entropy(v[0], &[4, 0, 2], None));
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn structural_ops_gradients() {
        for seed in 0..5 {
            let inputs = [random(&[3, 4], seed), random(&[2, 4], seed + 9), random(&[5, 3], seed + 19)];
            let f = |t: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
                let rows = t.concat_rows(&[v[0], v[1]])?; // 5×4
                let top = t.slice_rows(rows, 1, 3)?; // 3×4
                let tr = t.transpose(rows)?; // 4×5
                let left = t.slice_cols(tr, 0, 3)?; // 4×3
                let cols = t.concat_cols(&[left, tr])?; // 4×8
                let g = t.gather_rows(cols, &[3, 0, 3])?; // 3×8
                let w = t.reshape(v[2], &[3, 5])?;
                let wt = t.transpose(w)?; // 5×3
                let w4 = t.slice_rows(wt, 0, 4)?; // 4×3
                let prod = t.matmul(top, w4)?; // 3×3
                let s1 = t.sum(prod);
                let gg = t.mul(g, g)?;
                let s2 = t.mean(gg);
                t.mean_of(&[s1, s2])
            };
            for which in 0..3 {
                let err = check(&inputs, which, 1e-5, &f);
                assert!(err < 1e-4, "seed {seed} input {which}: {err}");
            }
        }
    }

    #[test]
    fn add_row_sub_scale_gradients() {
        for seed in 0..5 {
            let inputs = [random(&[3, 4], seed), random(&[4], seed + 3), random(&[3, 4], seed + 5)];
            let f = |t: &mut Tape<'_, f64>, v: &[Var]| -> Result<Var> {
                let a = t.add_row(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, b)?;
                let d = t.scale(c, 0.5);
                let e = t.add(d, v[0])?;
                Ok(t.sum(e))
            };
            for which in 0..3 {
                let err = check(&inputs, which, 1e-5, &f);
                assert!(err < 1e-4, "seed {seed} input {which}: {err}");
            }
        }
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn unused_params_get_zero_grad_constants_get_none() {
        let a = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let b = Tensor::<f64>::vector(vec![3.0]);
        let mut t = Tape::new();
        let va = t.param(&a);
        let vb = t.param(&b);
        let vc = t.constant(&a);
        let m = t.mul(va, vc).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(va).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(t.grad(vb).unwrap().data(), &[0.0]);
        assert!(t.grad(vc).is_none());
    }

    #[test]
    fn non_scalar_backward_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let x = random(&[6, 8], 11);
        let w = random(&[8, 8], 12);
        let f = || {
            run(|t| {
                let xv = t.input(x.clone(), false);
                let wv = t.input(w.clone(), false);
                let y = t.matmul(xv, wv)?;
                let y = t.silu(y);
                t.softmax(y)
            })
        };
        assert_eq!(f(), f());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution_and_shift_invariant(
                xs in prop::collection::vec(-30.0f64..30.0, 1..12),
                c in -100.0f64..100.0,
            ) {
                let a = run(|t| { let x = t.input(Tensor::vector(xs.clone()), false); t.softmax(x) });
                let b = run(|t| {
                    let x = t.input(Tensor::vector(xs.iter().map(|v| v + c).collect()), false);
                    t.softmax(x)
                });
                prop_assert!(a.data().iter().all(|&p| p > 0.0));
                prop_assert!((a.sum() - 1.0).abs() < 1e-6);
                prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
            }
        }
    }
}
