//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and appends a node; nodes are
//! therefore stored in topological order and [`Tape::backward`] is a single
//! reverse sweep. Values are [`Tensor`]s, i.e. `batch` matrices of identical
//! shape, so the per-instance inner loop of a whole mini-batch is a handful of
//! nodes rather than thousands.

use thiserror::Error;

use super::mat::{gemm, sigmoid, transpose_into};
use super::{backward_simplex_projection, Mat, ShapeError};
use crate::dependency::simplex_project;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{op}: batch sizes {lhs} and {rhs} differ")]
    Batch {
        op: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("backward requires a scalar loss, got {0}x{1}x{2}")]
    NotScalar(usize, usize, usize),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("simplex projection produced an empty support")]
    EmptySupport,
    #[error("simplex budget must be positive, got {0}")]
    InvalidBudget(f64),
    #[error("gather index {index} out of range for {cols} columns")]
    GatherIndex { index: usize, cols: usize },
    #[error("{0}")]
    Invalid(String),
}

/// A stack of `batch` row-major matrices of shape `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, rows: usize, cols: usize) -> Self {
        Tensor {
            batch,
            rows,
            cols,
            data: vec![0.0; batch * rows * cols],
        }
    }

    pub fn filled(batch: usize, rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            batch,
            rows,
            cols,
            data: vec![value; batch * rows * cols],
        }
    }

    pub fn from_vec(batch: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TapeError> {
        if data.len() != batch * rows * cols {
            return Err(TapeError::Invalid(format!(
                "tensor data length {} does not match {batch}x{rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor {
            batch,
            rows,
            cols,
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            batch: 1,
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Tensor {
            batch: 1,
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    /// Stacks matrices of identical shape.
    pub fn stack(mats: &[Mat]) -> Result<Self, TapeError> {
        let first = mats
            .first()
            .ok_or_else(|| TapeError::Invalid("cannot stack zero matrices".into()))?;
        let (rows, cols) = first.shape();
        let mut data = Vec::with_capacity(mats.len() * rows * cols);
        for m in mats {
            if m.shape() != (rows, cols) {
                return Err(ShapeError::new("stack", (rows, cols), m.shape()).into());
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Tensor {
            batch: mats.len(),
            rows,
            cols,
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.rows, self.cols)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn plane(&self) -> usize {
        self.rows * self.cols
    }

    /// The `b`-th matrix of the stack.
    pub fn item(&self, b: usize) -> &[f64] {
        let p = self.plane();
        &self.data[b * p..(b + 1) * p]
    }

    pub fn mat(&self, b: usize) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.item(b).to_vec()).expect("plane size")
    }

    pub fn scalar_value(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn mat_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Gram(Var),
    ColScale { mu: Var, m: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    FlattenBatch(Var),
    RepeatBatch(Var),
    AddBias { x: Var, bias: Var },
    ColSum(Var),
    Sum(Var),
    DiagProject(Var),
    SimplexProject { input: Var, supports: Vec<Vec<usize>> },
    Gather { table: Var, columns: Vec<usize>, scales: Vec<f64> },
    Pairwise { e: Var, phi: Var },
    BceWithLogitsSum { logits: Var, labels: Vec<f64> },
    SquaredErrorSum { pred: Var, targets: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every node that influenced it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (b, r, c) = self.shapes[v.0];
                Tensor::zeros(b, r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (b, r, c) = self.shapes[v.0];
                Tensor::zeros(b, r, c)
            }
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Tensor, TapeError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TapeError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives gradient (also serves as stop-gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn stop_gradient(&mut self, v: Var) -> Result<Var, TapeError> {
        let value = self.node(v)?.clone();
        Ok(self.constant(value))
    }

    fn same_batch(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TapeError> {
        if a.batch != b.batch {
            return Err(TapeError::Batch {
                op,
                lhs: a.batch,
                rhs: b.batch,
            });
        }
        Ok(())
    }

    fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TapeError> {
        Self::same_batch(op, a, b)?;
        if a.mat_shape() != b.mat_shape() {
            return Err(ShapeError::new(op, a.mat_shape(), b.mat_shape()).into());
        }
        Ok(())
    }

    /// Per-batch matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.node(a)?, self.node(b)?);
        Self::same_batch("matmul", ta, tb)?;
        if ta.cols != tb.rows {
            return Err(ShapeError::new("matmul", ta.mat_shape(), tb.mat_shape()).into());
        }
        let mut out = Tensor::zeros(ta.batch, ta.rows, tb.cols);
        let op = out.plane();
        for bi in 0..ta.batch {
            gemm(
                ta.rows,
                ta.cols,
                tb.cols,
                ta.item(bi),
                tb.item(bi),
                &mut out.data[bi * op..(bi + 1) * op],
                false,
            );
        }
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        let ta = self.node(a)?;
        let mut out = Tensor::zeros(ta.batch, ta.cols, ta.rows);
        let p = ta.plane();
        for bi in 0..ta.batch {
            transpose_into(ta.rows, ta.cols, ta.item(bi), &mut out.data[bi * p..(bi + 1) * p]);
        }
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// `EᵀE` per batch item.
    pub fn gram(&mut self, e: Var) -> Result<Var, TapeError> {
        let te = self.node(e)?;
        let mut out = Tensor::zeros(te.batch, te.cols, te.cols);
        let op = out.plane();
        for bi in 0..te.batch {
            super::mat::gram_into(te.rows, te.cols, te.item(bi), &mut out.data[bi * op..(bi + 1) * op]);
        }
        Ok(self.push(out, Op::Gram(e)))
    }

    /// Scales column `c` of each matrix in `m` by `mu[b][0][c]`; `mu` is `batch × 1 × cols`.
    pub fn col_scale(&mut self, mu: Var, m: Var) -> Result<Var, TapeError> {
        let (tmu, tm) = (self.node(mu)?, self.node(m)?);
        Self::same_batch("col_scale", tmu, tm)?;
        if tmu.rows != 1 || tmu.cols != tm.cols {
            return Err(ShapeError::new("col_scale", tmu.mat_shape(), tm.mat_shape()).into());
        }
        let mut out = tm.clone();
        let p = tm.plane();
        for bi in 0..tm.batch {
            let scales = tmu.item(bi);
            for row in out.data[bi * p..(bi + 1) * p].chunks_exact_mut(tm.cols) {
                for (v, s) in row.iter_mut().zip(scales) {
                    *v *= s;
                }
            }
        }
        Ok(self.push(out, Op::ColScale { mu, m }))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TapeError> {
        let (ta, tb) = (self.node(a)?, self.node(b)?);
        Self::same_shape(op_name, ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = like(ta, data);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TapeError> {
        let ta = self.node(a)?;
        let out = like(ta, ta.data.iter().map(|&x| f(x)).collect());
        Ok(self.push(out, op))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var, TapeError> {
        self.map(a, |x| x * alpha, Op::Scale(a, alpha))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TapeError> {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TapeError> {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Per-batch horizontal concatenation.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.node(a)?, self.node(b)?);
        Self::same_batch("concat", ta, tb)?;
        if ta.rows != tb.rows {
            return Err(ShapeError::new("concat", ta.mat_shape(), tb.mat_shape()).into());
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.batch * ta.rows * cols);
        for bi in 0..ta.batch {
            let (ia, ib) = (ta.item(bi), tb.item(bi));
            for r in 0..ta.rows {
                data.extend_from_slice(&ia[r * ta.cols..(r + 1) * ta.cols]);
                data.extend_from_slice(&ib[r * tb.cols..(r + 1) * tb.cols]);
            }
        }
        let out = Tensor {
            batch: ta.batch,
            rows: ta.rows,
            cols,
            data,
        };
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// `batch × r × c` to `1 × batch × (r·c)`: each item becomes one row
    /// holding its row-major vectorization.
    pub fn flatten_batch(&mut self, a: Var) -> Result<Var, TapeError> {
        let ta = self.node(a)?;
        let out = Tensor {
            batch: 1,
            rows: ta.batch,
            cols: ta.plane(),
            data: ta.data.clone(),
        };
        Ok(self.push(out, Op::FlattenBatch(a)))
    }

    /// Copies a single matrix `n` times along the batch axis.
    pub fn repeat_batch(&mut self, a: Var, n: usize) -> Result<Var, TapeError> {
        let ta = self.node(a)?;
        if ta.batch != 1 {
            return Err(TapeError::Batch {
                op: "repeat_batch",
                lhs: ta.batch,
                rhs: 1,
            });
        }
        let mut data = Vec::with_capacity(n * ta.data.len());
        for _ in 0..n {
            data.extend_from_slice(&ta.data);
        }
        let out = Tensor {
            batch: n,
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        Ok(self.push(out, Op::RepeatBatch(a)))
    }

    /// Adds the `1 × 1 × cols` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TapeError> {
        let (tx, tb) = (self.node(x)?, self.node(bias)?);
        if tb.batch != 1 || tb.rows != 1 || tb.cols != tx.cols {
            return Err(ShapeError::new("add_bias", tx.mat_shape(), tb.mat_shape()).into());
        }
        let mut out = tx.clone();
        for row in out.data.chunks_exact_mut(tx.cols) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    /// Column sums: `batch × r × c` to `batch × 1 × c`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var, TapeError> {
        let ta = self.node(a)?;
        let mut out = Tensor::zeros(ta.batch, 1, ta.cols);
        for bi in 0..ta.batch {
            let item = ta.item(bi);
            let dst = &mut out.data[bi * ta.cols..(bi + 1) * ta.cols];
            for row in item.chunks_exact(ta.cols) {
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        Ok(self.push(out, Op::ColSum(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        let s = self.node(a)?.data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// Sets the diagonal of each square item to `-1`.
    pub fn diag_project(&mut self, a: Var) -> Result<Var, TapeError> {
        let ta = self.node(a)?;
        if ta.rows != ta.cols {
            return Err(ShapeError::new("diag_project", ta.mat_shape(), ta.mat_shape()).into());
        }
        let mut out = ta.clone();
        let (n, p) = (ta.rows, ta.plane());
        for bi in 0..ta.batch {
            for i in 0..n {
                out.data[bi * p + i * n + i] = -1.0;
            }
        }
        Ok(self.push(out, Op::DiagProject(a)))
    }

    /// Projects every row of every item onto `{μ ≥ 0, Σμ = budget}`.
    pub fn simplex_project(&mut self, a: Var, budget: f64) -> Result<Var, TapeError> {
        if budget.is_nan() || budget <= 0.0 {
            return Err(TapeError::InvalidBudget(budget));
        }
        let ta = self.node(a)?;
        let mut out = ta.clone();
        let mut supports = Vec::with_capacity(ta.batch * ta.rows);
        for (src, dst) in ta.data.chunks_exact(ta.cols).zip(out.data.chunks_exact_mut(ta.cols)) {
            let proj = simplex_project(src, budget).map_err(|e| TapeError::Invalid(e.to_string()))?;
            dst.copy_from_slice(&proj.mu);
            supports.push(proj.support);
        }
        Ok(self.push(out, Op::SimplexProject { input: a, supports }))
    }

    /// Embedding lookup: output item `b` is `rows × m` whose column `i` is
    /// `scales[b·m+i]` times column `columns[b·m+i]` of the single-item `table`.
    pub fn gather_columns(&mut self, table: Var, columns: Vec<usize>, scales: Vec<f64>, m: usize) -> Result<Var, TapeError> {
        let tt = self.node(table)?;
        if tt.batch != 1 || m == 0 || !columns.len().is_multiple_of(m) || scales.len() != columns.len() {
            return Err(TapeError::Invalid(format!(
                "gather: table batch {}, {} columns, {} scales, m={m}",
                tt.batch,
                columns.len(),
                scales.len()
            )));
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= tt.cols) {
            return Err(TapeError::GatherIndex {
                index: bad,
                cols: tt.cols,
            });
        }
        let n = columns.len() / m;
        let (k, d) = (tt.rows, tt.cols);
        let mut out = Tensor::zeros(n, k, m);
        for bi in 0..n {
            for i in 0..m {
                let col = columns[bi * m + i];
                let s = scales[bi * m + i];
                for r in 0..k {
                    out.data[bi * k * m + r * m + i] = s * tt.data[r * d + col];
                }
            }
        }
        Ok(self.push(out, Op::Gather { table, columns, scales }))
    }

    /// Pairwise bilinear interactions: `e` is `n × k × m`, `phi` is
    /// `m(m−1)/2 × k × k` in lexicographic pair order; output is
    /// `1 × n × m(m−1)/2` with entry `e_iᵀ Φ^{ij} e_j`.
    pub fn pairwise_bilinear(&mut self, e: Var, phi: Var) -> Result<Var, TapeError> {
        let (te, tp) = (self.node(e)?, self.node(phi)?);
        let (n, k, m) = te.shape();
        let pairs = m * m.saturating_sub(1) / 2;
        if tp.batch != pairs || tp.rows != k || tp.cols != k {
            return Err(ShapeError::new("pairwise_bilinear", (k, m), (tp.batch, tp.rows)).into());
        }
        let mut out = Tensor::zeros(1, n, pairs);
        let mut ei = vec![0.0; k];
        let mut ej = vec![0.0; k];
        for bi in 0..n {
            let item = te.item(bi);
            let mut p = 0;
            for i in 0..m {
                column_into(item, k, m, i, &mut ei);
                for j in i + 1..m {
                    column_into(item, k, m, j, &mut ej);
                    out.data[bi * pairs + p] = super::bilinear_raw(&ei, tp.item(p), &ej);
                    p += 1;
                }
            }
        }
        Ok(self.push(out, Op::Pairwise { e, phi }))
    }

    /// `Σ −[y·ln σ(z) + (1−y)·ln(1−σ(z))]` over all entries, in the stable
    /// form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits_sum(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var, TapeError> {
        let tz = self.node(logits)?;
        if tz.data.len() != labels.len() {
            return Err(ShapeError::new("bce", (tz.data.len(), 1), (labels.len(), 1)).into());
        }
        let s = tz.data.iter().zip(&labels).map(|(&z, &y)| bce_with_logit(z, y)).sum();
        Ok(self.push(Tensor::scalar(s), Op::BceWithLogitsSum { logits, labels }))
    }

    /// `Σ (p − y)²` over all entries.
    pub fn squared_error_sum(&mut self, pred: Var, targets: Vec<f64>) -> Result<Var, TapeError> {
        let tp = self.node(pred)?;
        if tp.data.len() != targets.len() {
            return Err(ShapeError::new("squared_error", (tp.data.len(), 1), (targets.len(), 1)).into());
        }
        let s = tp.data.iter().zip(&targets).map(|(&p, &y)| (p - y) * (p - y)).sum();
        Ok(self.push(Tensor::scalar(s), Op::SquaredErrorSum { pred, targets }))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        self.backward_with(loss, 1.0)
    }

    /// Reverse sweep seeded with `seed · ∂loss/∂loss`.
    pub fn backward_with(&self, loss: Var, seed: f64) -> Result<Gradients, TapeError> {
        let top = self.node(loss)?;
        if top.data.len() != 1 {
            let (b, r, c) = top.shape();
            return Err(TapeError::NotScalar(b, r, c));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(like(top, vec![seed]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, inner, c) = (ta.rows, ta.cols, tb.cols);
                let mut ga = Tensor::zeros(ta.batch, r, inner);
                let mut gb = Tensor::zeros(tb.batch, inner, c);
                let mut bt = vec![0.0; inner * c];
                let mut at = vec![0.0; r * inner];
                for bi in 0..ta.batch {
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    transpose_into(inner, c, tb.item(bi), &mut bt);
                    gemm(r, c, inner, g.item(bi), &bt, &mut ga.data[bi * r * inner..(bi + 1) * r * inner], false);
                    transpose_into(r, inner, ta.item(bi), &mut at);
                    gemm(inner, r, c, &at, g.item(bi), &mut gb.data[bi * inner * c..(bi + 1) * inner * c], false);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => {
                let mut ga = Tensor::zeros(val.batch, val.cols, val.rows);
                let p = val.plane();
                for bi in 0..val.batch {
                    transpose_into(val.rows, val.cols, g.item(bi), &mut ga.data[bi * p..(bi + 1) * p]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Gram(e) => {
                // d(EᵀE) = E·(G + Gᵀ)
                let te = self.value(*e);
                let (k, m) = (te.rows, te.cols);
                let mut ge = Tensor::zeros(te.batch, k, m);
                let mut sym = vec![0.0; m * m];
                for bi in 0..te.batch {
                    let gi = g.item(bi);
                    for i in 0..m {
                        for j in 0..m {
                            sym[i * m + j] = gi[i * m + j] + gi[j * m + i];
                        }
                    }
                    gemm(k, m, m, te.item(bi), &sym, &mut ge.data[bi * k * m..(bi + 1) * k * m], false);
                }
                accumulate(grads, *e, ge);
            }
            Op::ColScale { mu, m } => {
                let (tmu, tm) = (self.value(*mu), self.value(*m));
                let cols = tm.cols;
                let p = tm.plane();
                let mut gm = g.clone();
                let mut gmu = Tensor::zeros(tmu.batch, 1, cols);
                for bi in 0..tm.batch {
                    let scales = tmu.item(bi);
                    let mi = tm.item(bi);
                    let gi = g.item(bi);
                    let gmu_i = &mut gmu.data[bi * cols..(bi + 1) * cols];
                    for r in 0..tm.rows {
                        for c in 0..cols {
                            gmu_i[c] += gi[r * cols + c] * mi[r * cols + c];
                        }
                    }
                    for row in gm.data[bi * p..(bi + 1) * p].chunks_exact_mut(cols) {
                        for (v, s) in row.iter_mut().zip(scales) {
                            *v *= s;
                        }
                    }
                }
                accumulate(grads, *m, gm);
                accumulate(grads, *mu, gmu);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, scaled(g, -1.0));
            }
            Op::Scale(a, alpha) => accumulate(grads, *a, scaled(g, *alpha)),
            Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip_tensor(g, tb, |x, y| x * y));
                accumulate(grads, *b, zip_tensor(g, ta, |x, y| x * y));
            }
            Op::Relu(a) => {
                accumulate(grads, *a, zip_tensor(g, val, |gv, out| if out > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, zip_tensor(g, val, |gv, s| gv * s * (1.0 - s)));
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(ta.batch, ta.rows, ta.cols);
                let mut gb = Tensor::zeros(tb.batch, tb.rows, tb.cols);
                let mut ia = 0;
                let mut ib = 0;
                for row in g.data.chunks_exact(val.cols) {
                    ga.data[ia..ia + ta.cols].copy_from_slice(&row[..ta.cols]);
                    gb.data[ib..ib + tb.cols].copy_from_slice(&row[ta.cols..]);
                    ia += ta.cols;
                    ib += tb.cols;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::FlattenBatch(a) => {
                let ta = self.value(*a);
                let ga = like(ta, g.data.clone());
                accumulate(grads, *a, ga);
            }
            Op::RepeatBatch(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(1, ta.rows, ta.cols);
                for bi in 0..g.batch {
                    for (d, v) in ga.data.iter_mut().zip(g.item(bi)) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::AddBias { x, bias } => {
                let cols = val.cols;
                let mut gbias = Tensor::zeros(1, 1, cols);
                for row in g.data.chunks_exact(cols) {
                    for (d, v) in gbias.data.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, gbias);
            }
            Op::ColSum(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.batch, ta.rows, ta.cols);
                let p = ta.plane();
                for bi in 0..ta.batch {
                    let gi = g.item(bi);
                    for row in ga.data[bi * p..(bi + 1) * p].chunks_exact_mut(ta.cols) {
                        row.copy_from_slice(gi);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let (b, r, c) = ta.shape();
                accumulate(grads, *a, Tensor::filled(b, r, c, g.data[0]));
            }
            Op::DiagProject(a) => {
                let mut ga = g.clone();
                let (n, p) = (val.rows, val.plane());
                for bi in 0..val.batch {
                    for i in 0..n {
                        ga.data[bi * p + i * n + i] = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SimplexProject { input, supports } => {
                let mut ga = Tensor::zeros(val.batch, val.rows, val.cols);
                for ((grow, dst), support) in g
                    .data
                    .chunks_exact(val.cols)
                    .zip(ga.data.chunks_exact_mut(val.cols))
                    .zip(supports)
                {
                    let back = backward_simplex_projection(grow, support)
                        .expect("support is non-empty for a positive budget");
                    dst.copy_from_slice(&back);
                }
                accumulate(grads, *input, ga);
            }
            Op::Gather { table, columns, scales } => {
                let tt = self.value(*table);
                let (k, d) = (tt.rows, tt.cols);
                let m = val.cols;
                let mut gt = Tensor::zeros(1, k, d);
                for bi in 0..val.batch {
                    let gi = g.item(bi);
                    for i in 0..m {
                        let col = columns[bi * m + i];
                        let s = scales[bi * m + i];
                        for r in 0..k {
                            gt.data[r * d + col] += s * gi[r * m + i];
                        }
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Pairwise { e, phi } => {
                let (te, tp) = (self.value(*e), self.value(*phi));
                let (n, k, m) = te.shape();
                let pairs = tp.batch;
                let mut ge = Tensor::zeros(n, k, m);
                let mut gp = Tensor::zeros(pairs, k, k);
                let mut ei = vec![0.0; k];
                let mut ej = vec![0.0; k];
                for bi in 0..n {
                    let item = te.item(bi);
                    let mut p = 0;
                    for i in 0..m {
                        column_into(item, k, m, i, &mut ei);
                        for j in i + 1..m {
                            column_into(item, k, m, j, &mut ej);
                            let gv = g.data[bi * pairs + p];
                            if gv != 0.0 {
                                let phi_p = tp.item(p);
                                let gep = &mut ge.data[bi * k * m..(bi + 1) * k * m];
                                for r in 0..k {
                                    // ∂/∂e_i = Φ e_j, ∂/∂e_j = Φᵀ e_i
                                    let mut di = 0.0;
                                    let mut dj = 0.0;
                                    for c in 0..k {
                                        di += phi_p[r * k + c] * ej[c];
                                        dj += phi_p[c * k + r] * ei[c];
                                    }
                                    gep[r * m + i] += gv * di;
                                    gep[r * m + j] += gv * dj;
                                }
                                let gphi = &mut gp.data[p * k * k..(p + 1) * k * k];
                                for r in 0..k {
                                    let a = gv * ei[r];
                                    for c in 0..k {
                                        gphi[r * k + c] += a * ej[c];
                                    }
                                }
                            }
                            p += 1;
                        }
                    }
                }
                accumulate(grads, *e, ge);
                accumulate(grads, *phi, gp);
            }
            Op::BceWithLogitsSum { logits, labels } => {
                let tz = self.value(*logits);
                let gv = g.data[0];
                let data = tz.data.iter().zip(labels).map(|(&z, &y)| gv * (sigmoid(z) - y)).collect();
                accumulate(grads, *logits, like(tz, data));
            }
            Op::SquaredErrorSum { pred, targets } => {
                let tp = self.value(*pred);
                let gv = g.data[0];
                let data = tp.data.iter().zip(targets).map(|(&p, &y)| gv * 2.0 * (p - y)).collect();
                accumulate(grads, *pred, like(tp, data));
            }
        }
    }
}

/// A tensor shaped like `t` holding `data`.
fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(data.len(), t.data.len());
    Tensor {
        batch: t.batch,
        rows: t.rows,
        cols: t.cols,
        data,
    }
}

#[inline]
fn column_into(item: &[f64], k: usize, m: usize, col: usize, out: &mut [f64]) {
    for r in 0..k {
        out[r] = item[r * m + col];
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn scaled(g: &Tensor, alpha: f64) -> Tensor {
    let mut out = g.clone();
    out.data.iter_mut().for_each(|v| *v *= alpha);
    out
}

fn zip_tensor(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (x, &y) in out.data.iter_mut().zip(&b.data) {
        *x = f(*x, y);
    }
    out
}

#[inline]
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
