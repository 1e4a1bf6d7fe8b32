//! Dense `f64` tensors with a tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] table keyed by [`Var`]. Parameters live outside the tape as
//! plain [`Tensor`]s and are bound as leaves at the start of each step.

mod adam;
pub mod kernels;
mod nn;

pub use adam::{Adam, AdamConfig};
pub use nn::{gumbel_softmax, linear, multi_head_self_attention, AttentionParams, GumbelNoise};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a rank-2 tensor (a scalar or vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }
}

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Transpose(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SumAll(Var),
    ColumnSums(Var),
    Square(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    KlDivergence {
        p: Var,
        target: Vec<f64>,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!("{op}: shapes {:?} and {:?}", a.shape, b.shape))
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Register a tensor as a leaf. Gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.push(value, Op::Leaf, needs)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul(&ta.data, &tb.data, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.cols() {
            return Err(dim_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let data = kernels::matmul_nt(&ta.data, &tb.data, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMulNt(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Adds a `1×n` (or length-`n`) row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.numel() != ta.cols() {
            return Err(dim_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data[i % c])
            .collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let needs = self.needs(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * factor).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), needs)
    }

    /// `a + c` for a constant tensor `c`; the gradient passes straight to `a`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if !ta.same_shape(c) {
            return Err(dim_err("add_const", ta, c));
        }
        let data = ta.data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::AddConst(a), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose expects a matrix, got {:?}",
                ta.shape
            )));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let value = Tensor::matrix(c, r, kernels::transpose(&ta.data, r, c))?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    /// Softmax of a matrix along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_rows(a),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::Dimension(format!("softmax axis {axis} on a matrix"))),
        }
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let c = ta.cols();
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data.chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(row, o);
        }
        let value = Tensor::new(ta.shape.clone(), out)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| gelu(x)).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::Gelu(a), needs)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.numel() != c || tb.numel() != c {
            return Err(dim_err("layer_norm", tx, tg));
        }
        let r = tx.rows();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let value = Tensor::new(tx.shape.clone(), out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if start + width > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * width);
        for row in ta.data.chunks(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let value = Tensor::matrix(ta.rows(), width, data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::SliceCols { x: a, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::matrix(rows, width, data)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::Dimension("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols.max(1);
        let value = Tensor::matrix(rows, cols, data)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// `out[i] = a[index[i]]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index(format!("row {i} of {r}")));
            }
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Rows of an embedding table selected by token id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    /// Sum over rows, giving a `1×cols` row of column totals.
    pub fn column_sums(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut sums = vec![0.0; c];
        for row in ta.data.chunks(c) {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        let needs = self.needs(&[a]);
        self.push(
            Tensor {
                shape: vec![1, c],
                data: sums,
                requires_grad: false,
                grad: None,
            },
            Op::ColumnSums(a),
            needs,
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * x).collect(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::Square(a), needs)
    }

    /// Mean token cross-entropy; positions with a `None` target are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, v) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(Error::Dimension(format!(
                "cross_entropy: {r} logit rows but {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            let row = tl.row(i);
            kernels::softmax_row(row, &mut probs[i * v..(i + 1) * v]);
            if let Some(t) = *target {
                if t >= v {
                    return Err(Error::Index(format!(
                        "target id {t} at position {i} with vocabulary size {v}"
                    )));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// `Σ T·(ln T − ln P)` for a constant target `T`, with `0·ln 0 = 0` and
    /// `P` clamped below at [`PROB_FLOOR`].
    pub fn kl_divergence(&mut self, target: &Tensor, p: Var) -> Result<Var> {
        let tp = self.value(p);
        if !tp.same_shape(target) {
            return Err(dim_err("kl_divergence", target, tp));
        }
        let value = kl_value(&target.data, &tp.data);
        let needs = self.needs(&[p]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDivergence {
                p,
                target: target.data.clone(),
            },
            needs,
        ))
    }

    /// Forward: one-hot at each row's argmax. Backward: identity into `soft`.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let ts = self.value(soft);
        let c = ts.cols();
        let mut data = vec![0.0; ts.numel()];
        for (row, out) in ts.data.chunks(c).zip(data.chunks_mut(c)) {
            out[kernels::argmax(row)] = 1.0;
        }
        let value = Tensor {
            shape: ts.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let needs = self.needs(&[soft]);
        self.push(value, Op::StraightThrough(soft), needs)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar of shape {:?}",
                self.value(output).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |s| {
                    let d = kernels::matmul_nt(g, &tb.data, m, n, k);
                    add_into(s, &d);
                });
                acc(*b, &mut |s| kernels::matmul_tn_acc(s, &ta.data, g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |s| {
                    let d = kernels::matmul(g, &tb.data, m, n, k);
                    add_into(s, &d);
                });
                acc(*b, &mut |s| kernels::matmul_tn_acc(s, g, &ta.data, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| add_into(s, g));
                let c = nodes[row.0].value.numel();
                acc(*row, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&tb.data) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&ta.data) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |s| {
                for (s, g) in s.iter_mut().zip(g) {
                    *s += g * f;
                }
            }),
            Op::AddConst(a) | Op::StraightThrough(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*a, &mut |s| add_into(s, &kernels::transpose(g, r, c)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(c).zip(y.data.chunks(c)).zip(g.chunks(c))
                    {
                        let inner = kernels::dot(grow, yrow);
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value.data;
                acc(*a, &mut |s| {
                    for ((s, g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = &nodes[gamma.0].value.data;
                let c = gam.len();
                acc(*x, &mut |s| {
                    for (i, ((srow, grow), hrow)) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let gg: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_g = gg.iter().sum::<f64>() / c as f64;
                        let mean_gh = kernels::dot(&gg, hrow) / c as f64;
                        for j in 0..c {
                            srow[j] += rstd[i] * (gg[j] - mean_g - hrow[j] * mean_gh);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for grow in g.chunks(c) {
                        add_into(s, grow);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let width = node.value.cols();
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(width)) {
                        add_into(&mut srow[*start..*start + width], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let width = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    acc(*p, &mut |s| {
                        for (srow, grow) in s.chunks_mut(pc).zip(g.chunks(width)) {
                            add_into(srow, &grow[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(*p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for (out_row, &src) in index.iter().enumerate() {
                        add_into(&mut s[src * c..(src + 1) * c], &g[out_row * c..(out_row + 1) * c]);
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |s| {
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::ColumnSums(a) => {
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for srow in s.chunks_mut(c) {
                        add_into(srow, g);
                    }
                });
            }
            Op::Square(a) => {
                let x = &nodes[a.0].value.data;
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += 2.0 * x * g;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |s| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let srow = &mut s[i * v..(i + 1) * v];
                        for j in 0..v {
                            srow[j] += scale * probs[i * v + j];
                        }
                        srow[t] -= scale;
                    }
                });
            }
            Op::KlDivergence { p, target } => {
                let pv = &nodes[p.0].value.data;
                acc(*p, &mut |s| {
                    for ((s, &t), &p) in s.iter_mut().zip(target).zip(pv) {
                        if t > 0.0 && p > PROB_FLOOR {
                            *s -= g[0] * t / p;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Plain-value KL divergence shared by the tape op and by callers that do
/// not need gradients.
pub fn kl_value(target: &[f64], p: &[f64]) -> f64 {
    target
        .iter()
        .zip(p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &p)| t * (t.ln() - p.max(PROB_FLOOR).ln()))
        .sum()
}
