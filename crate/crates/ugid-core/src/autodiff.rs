//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass into a
//! flat arena; [`Tape::backward`] replays the records in reverse creation
//! order (which is reverse topological order, since every operand precedes
//! its consumers) and accumulates vector-Jacobian products. Nodes that no
//! gradient reaches are skipped, so constants and frozen subgraphs cost
//! nothing on the way back.
//!
//! The op set is exactly what the toy transformer and its training losses
//! need; there is no broadcasting beyond bias rows and no precision below
//! `f64`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("eps {0} outside supported range (1e-8, 1e-2)")]
    BadEps(f64),
    #[error("tensor shape {shape:?} does not hold {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::ShapeMismatch { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rank-2 accessor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: f64 },
    Sum { x: ValueId },
    /// out = a @ b, a: m×k, b: k×n.
    Matmul { a: ValueId, b: ValueId, m: usize, k: usize, n: usize },
    /// out = a @ bᵀ, a: m×k, b: n×k.
    MatmulTransposeB { a: ValueId, b: ValueId, m: usize, k: usize, n: usize },
    Gelu { x: ValueId },
    Exp { x: ValueId },
    Abs { x: ValueId },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, rows: usize, cols: usize },
    SoftmaxRows { x: ValueId, rows: usize, cols: usize },
    LogSoftmaxRows { x: ValueId, rows: usize, cols: usize },
    /// Gather rows of `table` at fixed indices.
    EmbedRows { table: ValueId, ids: Vec<usize>, cols: usize },
    /// Contiguous slice along axis 0 (rows for matrices, entries for vectors).
    SliceAxis0 { x: ValueId, row_len: usize, start: usize, len: usize },
    SliceCols { x: ValueId, rows: usize, cols: usize, start: usize, len: usize },
    /// Horizontal concatenation of equally sized rank-2 parts.
    ConcatCols { parts: Vec<ValueId>, rows: usize, part_cols: usize },
    ColSums { x: ValueId, rows: usize, cols: usize },
    RowSums { x: ValueId, rows: usize, cols: usize },
    Diag { x: ValueId, n: usize },
    /// Broadcast-add a length-`cols` bias to every row.
    AddBiasRow { x: ValueId, bias: ValueId, rows: usize, cols: usize },
    Reshape { x: ValueId },
    /// Arbitrary element gather; backward scatter-adds into the source.
    GatherFlat { x: ValueId, idx: Vec<usize> },
    Pick { x: ValueId, idx: usize },
    /// Replace one row with fixed values; gradient passes everywhere else.
    OverwriteRow { x: ValueId, row: usize, row_len: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward computation, replayable backward for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if any reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a differentiable leaf, zeros if nothing flowed to it.
    pub fn grad_or_zeros(&self, id: ValueId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> ValueId {
        debug_assert!(value.is_finite(), "non-finite value out of {op:?}");
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn needs_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Differentiable leaf (a parameter or a checked input).
    pub fn param(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> ValueId {
        self.constant(Tensor::scalar(v))
    }

    // ── Primitive operations ─────────────────────────────────────────

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: ValueId) -> ValueId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor { shape, data }, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor { shape, data }, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor { shape, data }, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.needs_grad(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor::matrix(m, n, out), Op::Matmul { a, b, m, k, n }, rg)
    }

    /// a @ bᵀ without materializing the transpose.
    pub fn matmul_transpose_b(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_tb inner dim mismatch");
        let mut out = vec![0.0; m * n];
        matmul_tb_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor::matrix(m, n, out), Op::MatmulTransposeB { a, b, m, k, n }, rg)
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::Gelu { x }, rg)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::Exp { x }, rg)
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.abs()).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::Abs { x }, rg)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> ValueId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(self.value(gain).numel(), cols, "layer_norm gain length");
        assert_eq!(self.value(bias).numel(), cols, "layer_norm bias length");
        let mut out = vec![0.0; rows * cols];
        {
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for r in 0..rows {
                let row = &t.data()[r * cols..(r + 1) * cols];
                let (mean, inv_std) = row_moments(row);
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - mean) * inv_std * g[c] + b[c];
                }
            }
        }
        let rg = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::LayerNorm { x, gain, bias, rows, cols },
            rg,
        )
    }

    /// Row-wise softmax with max subtraction. With `causal` set the input
    /// must be square and entries above the diagonal come out exactly zero.
    pub fn softmax_rows(&mut self, x: ValueId, causal: bool) -> Result<ValueId, AutodiffError> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(AutodiffError::NonFiniteLogits);
        }
        let (rows, cols) = (t.rows(), t.cols());
        if causal {
            assert_eq!(rows, cols, "causal softmax needs a square matrix");
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let active = if causal { r + 1 } else { cols };
            let row = &t.data()[r * cols..r * cols + active];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..active {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..active {
                out[r * cols + c] /= denom;
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::SoftmaxRows { x, rows, cols },
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: ValueId) -> Result<ValueId, AutodiffError> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(AutodiffError::NonFiniteLogits);
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_denom = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - max - log_denom;
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::LogSoftmaxRows { x, rows, cols }, rg))
    }

    pub fn embed_rows(&mut self, table: ValueId, ids: &[usize]) -> ValueId {
        let t = self.value(table);
        let (vocab, cols) = (t.rows(), t.cols());
        assert!(ids.iter().all(|&i| i < vocab), "embedding index out of range");
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.needs_grad(table);
        self.push(
            Tensor::matrix(ids.len(), cols, out),
            Op::EmbedRows { table, ids: ids.to_vec(), cols },
            rg,
        )
    }

    /// Slice along axis 0. Rows of a matrix, entries of a vector.
    pub fn slice_axis0(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let t = self.value(x);
        let axis0 = t.shape()[0];
        assert!(start + len <= axis0, "slice_axis0 out of range");
        let row_len = t.numel() / axis0;
        let data = t.data()[start * row_len..(start + len) * row_len].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::SliceAxis0 { x, row_len, start, len }, rg)
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.needs_grad(x);
        self.push(
            Tensor::matrix(rows, len, out),
            Op::SliceCols { x, rows, cols, start, len },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let part_cols = self.value(parts[0]).cols();
        for &p in parts {
            assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
            assert_eq!(self.value(p).cols(), part_cols, "concat_cols col mismatch");
        }
        let cols = part_cols * parts.len();
        let mut out = vec![0.0; rows * cols];
        for (pi, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            for r in 0..rows {
                let dst = r * cols + pi * part_cols;
                out[dst..dst + part_cols]
                    .copy_from_slice(&t.data()[r * part_cols..(r + 1) * part_cols]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs_grad(p));
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatCols { parts: parts.to_vec(), rows, part_cols },
            rg,
        )
    }

    pub fn col_sums(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += t.data()[r * cols + c];
            }
        }
        let rg = self.needs_grad(x);
        self.push(Tensor::vector(out), Op::ColSums { x, rows, cols }, rg)
    }

    pub fn row_sums(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let out: Vec<f64> =
            (0..rows).map(|r| t.data()[r * cols..(r + 1) * cols].iter().sum()).collect();
        let rg = self.needs_grad(x);
        self.push(Tensor::vector(out), Op::RowSums { x, rows, cols }, rg)
    }

    pub fn diag(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let n = t.rows();
        assert_eq!(n, t.cols(), "diag of non-square matrix");
        let out: Vec<f64> = (0..n).map(|i| t.data()[i * n + i]).collect();
        let rg = self.needs_grad(x);
        self.push(Tensor::vector(out), Op::Diag { x, n }, rg)
    }

    pub fn add_bias_row(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(self.value(bias).numel(), cols, "bias length mismatch");
        let b = self.value(bias).data().to_vec();
        let mut out = t.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += b[c];
            }
        }
        let rg = self.needs_grad(x) || self.needs_grad(bias);
        self.push(Tensor::matrix(rows, cols, out), Op::AddBiasRow { x, bias, rows, cols }, rg)
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> ValueId {
        let t = self.value(x);
        assert_eq!(t.numel(), shape.iter().product::<usize>(), "reshape numel mismatch");
        let data = t.data().to_vec();
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::Reshape { x }, rg)
    }

    /// Gather flat elements into a new tensor of the given shape.
    pub fn gather_flat(&mut self, x: ValueId, idx: &[usize], shape: Vec<usize>) -> ValueId {
        let t = self.value(x);
        assert_eq!(idx.len(), shape.iter().product::<usize>(), "gather shape mismatch");
        assert!(idx.iter().all(|&i| i < t.numel()), "gather index out of range");
        let data: Vec<f64> = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.needs_grad(x);
        self.push(Tensor { shape, data }, Op::GatherFlat { x, idx: idx.to_vec() }, rg)
    }

    /// Scalar at a flat index.
    pub fn pick(&mut self, x: ValueId, idx: usize) -> ValueId {
        let v = self.value(x).data()[idx];
        let rg = self.needs_grad(x);
        self.push(Tensor::scalar(v), Op::Pick { x, idx }, rg)
    }

    /// Replace row `row` with fixed `values` (an intervention, not a learned
    /// quantity): gradient flows through all other rows unchanged.
    pub fn overwrite_row(&mut self, x: ValueId, row: usize, values: &[f64]) -> ValueId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(row < rows, "overwrite_row out of range");
        assert_eq!(values.len(), cols, "overwrite_row width mismatch");
        let mut out = t.data().to_vec();
        out[row * cols..(row + 1) * cols].copy_from_slice(values);
        let rg = self.needs_grad(x);
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::OverwriteRow { x, row, row_len: cols },
            rg,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar `loss` into every node that can
    /// reach it. Each node is visited exactly once, in reverse order of
    /// creation.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), AutodiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.data()[0].is_finite() {
            return Err(AutodiffError::NonFiniteLoss(lv.data()[0]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(contrib) {
                    *dst += src;
                }
            }
            None => self.grads[id.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, node: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> =
                    g.iter().zip(self.nodes[b.0].value.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> =
                    g.iter().zip(self.nodes[a.0].value.data()).map(|(g, x)| g * x).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.nodes[x.0].value.numel()];
                self.accumulate(*x, &dx);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // dA = g @ bᵀ
                let mut da = vec![0.0; m * k];
                matmul_tb_into(g, self.nodes[b.0].value.data(), &mut da, m, n, k);
                self.accumulate(*a, &da);
                // dB = aᵀ @ g
                let mut db = vec![0.0; k * n];
                matmul_at_into(self.nodes[a.0].value.data(), g, &mut db, m, k, n);
                self.accumulate(*b, &db);
            }
            Op::MatmulTransposeB { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // out = a @ bᵀ; dA = g @ b, dB = gᵀ @ a
                let mut da = vec![0.0; m * k];
                matmul_into(g, self.nodes[b.0].value.data(), &mut da, m, n, k);
                self.accumulate(*a, &da);
                let mut db = vec![0.0; n * k];
                matmul_at_into(g, self.nodes[a.0].value.data(), &mut db, m, n, k);
                self.accumulate(*b, &db);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Exp { x } => {
                let dx: Vec<f64> =
                    g.iter().zip(self.nodes[node].value.data()).map(|(g, y)| g * y).collect();
                self.accumulate(*x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gain, bias, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gain.0].value.data().to_vec();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let (mean, inv_std) = row_moments(row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(&gv).map(|(g, gain)| g * gain).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                        dx[r * cols + c] =
                            inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = self.nodes[node].value.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LogSoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let y = self.nodes[node].value.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::EmbedRows { table, ids, cols } => {
                let cols = *cols;
                let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[id * cols + c] += g[r * cols + c];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::SliceAxis0 { x, row_len, start, len } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[start * row_len..(start + len) * row_len].copy_from_slice(g);
                self.accumulate(*x, &dx);
            }
            Op::SliceCols { x, rows, cols, start, len } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*len {
                        dx[r * cols + start + c] = g[r * len + c];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::ConcatCols { parts, rows, part_cols } => {
                let cols = part_cols * parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    let mut dp = vec![0.0; rows * part_cols];
                    for r in 0..*rows {
                        let src = r * cols + pi * part_cols;
                        dp[r * part_cols..(r + 1) * part_cols]
                            .copy_from_slice(&g[src..src + part_cols]);
                    }
                    self.accumulate(p, &dp);
                }
            }
            Op::ColSums { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    dx[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                self.accumulate(*x, &dx);
            }
            Op::RowSums { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = g[r];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Diag { x, n } => {
                let mut dx = vec![0.0; n * n];
                for i in 0..*n {
                    dx[i * n + i] = g[i];
                }
                self.accumulate(*x, &dx);
            }
            Op::AddBiasRow { x, bias, rows, cols } => {
                self.accumulate(*x, g);
                let mut db = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += g[r * cols + c];
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, g);
            }
            Op::GatherFlat { x, idx } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += g[k];
                }
                self.accumulate(*x, &dx);
            }
            Op::Pick { x, idx } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[*idx] = g[0];
                self.accumulate(*x, &dx);
            }
            Op::OverwriteRow { x, row, row_len } => {
                let mut dx = g.to_vec();
                dx[row * row_len..(row + 1) * row_len].iter_mut().for_each(|v| *v = 0.0);
                self.accumulate(*x, &dx);
            }
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

/// out += is not used anywhere: every kernel writes a zeroed buffer.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a @ bᵀ, a: m×k, b: n×k, out: m×n.
fn matmul_tb_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// out = aᵀ @ b, a: m×k, b: m×n, out: k×n.
fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-8;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

// ── Gradient checking ────────────────────────────────────────────────

/// Compare the analytic gradient of a scalar-valued function against
/// central finite differences at `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic − central_difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId, AutodiffError>,
{
    if !(1e-8..1e-2).contains(&eps) {
        return Err(AutodiffError::BadEps(eps));
    }

    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let out = f(&mut tape, xid)?;
    let base = tape.value(out).data()[0];
    if !base.is_finite() {
        return Err(AutodiffError::NonFiniteLoss(base));
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(xid);

    let eval = |t: &Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let xid = tape.constant(t.clone());
        let out = f(&mut tape, xid)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x, false).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits_match_direct_exponentiation() {
        // Oracle: softmax([1, 2]) = [1/(1+e), e/(1+e)].
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let y = tape.softmax_rows(x, false).unwrap();
        let e = std::f64::consts::E;
        let expect = [1.0 / (1.0 + e), e / (1.0 + e)];
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((tape.value(y).data()[0] - 0.2689).abs() < 5e-5);
        assert!((tape.value(y).data()[1] - 0.7311).abs() < 5e-5);
    }

    #[test]
    fn causal_softmax_first_row_is_delta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 3, vec![5.0; 9]));
        let y = tape.softmax_rows(x, true).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0), 1.0);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(0, 2), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        for r in 0..3 {
            let s: f64 = (0..3).map(|c| v.at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor { shape: vec![1, 2], data: vec![1.0, 2.0] });
        // Smuggle a NaN in after construction to hit the check.
        tape.nodes[x.0].value.data_mut()[0] = f64::NAN;
        let err = tape.softmax_rows(x, false).unwrap_err();
        assert_eq!(err.to_string(), "non-finite logits");
    }

    #[test]
    fn stop_gradient_blocks_backward_exactly() {
        // y = sg(x) * x at x = 3: value 9, dy/dx = 3 (not 6).
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let frozen = tape.stop_gradient(x);
        let y = tape.mul(frozen, x);
        assert_eq!(tape.value(y).data()[0], 9.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn stop_gradient_alone_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(5.0));
        let y = tape.stop_gradient(x);
        assert_eq!(tape.value(y).data()[0], 5.0);
        // Reduce through sum so backward has a scalar target.
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_or_zeros(x), vec![0.0]);
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let f = |tape: &mut Tape, x: ValueId| -> Result<ValueId, AutodiffError> {
            let y = tape.mul(x, x);
            Ok(tape.sum(y))
        };
        let err = grad_check(f, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let f = |tape: &mut Tape, x: ValueId| -> Result<ValueId, AutodiffError> { Ok(tape.sum(x)) };
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-1).is_err());
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-9).is_err());
    }

    #[test]
    fn matmul_gradients_check_out() {
        let f = |tape: &mut Tape, x: ValueId| -> Result<ValueId, AutodiffError> {
            let a = tape.slice_axis0(x, 0, 2); // 2×3
            let b0 = tape.slice_axis0(x, 2, 3); // 3×3
            let prod = tape.matmul(a, b0);
            let sq = tape.mul(prod, prod);
            Ok(tape.sum(sq))
        };
        let x = Tensor::matrix(5, 3, (0..15).map(|i| 0.3 * i as f64 - 2.0).collect());
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn fused_ops_gradients_check_out() {
        // layer_norm + gelu + causal softmax + log-softmax composed.
        let f = |tape: &mut Tape, x: ValueId| -> Result<ValueId, AutodiffError> {
            let gain = tape.constant(Tensor::vector(vec![1.1, 0.9, 1.0, 1.2]));
            let bias = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.0, 0.3]));
            let normed = tape.layer_norm(x, gain, bias);
            let act = tape.gelu(normed);
            let sm = tape.softmax_rows(act, true)?;
            let ls = tape.log_softmax_rows(sm)?;
            let p = tape.exp(ls);
            let prod = tape.mul(p, ls);
            Ok(tape.sum(prod))
        };
        let x = Tensor::matrix(
            4,
            4,
            vec![
                0.5, -1.2, 0.3, 0.9, 1.4, 0.2, -0.7, 0.1, -0.3, 0.8, 1.1, -0.5, 0.6, -0.9, 0.4,
                1.3,
            ],
        );
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn structural_ops_gradients_check_out() {
        let f = |tape: &mut Tape, x: ValueId| -> Result<ValueId, AutodiffError> {
            let cs = tape.col_sums(x);
            let d = tape.diag(x);
            let lam = tape.sub(cs, d);
            let head = tape.slice_axis0(lam, 1, 3);
            let sq = tape.mul(head, head);
            let rows = tape.slice_axis0(x, 0, 2);
            let cols = tape.slice_cols(rows, 1, 2);
            let joined = tape.concat_cols(&[cols, cols]);
            let rs = tape.row_sums(joined);
            let s1 = tape.sum(sq);
            let s2 = tape.sum(rs);
            let total = tape.add(s1, s2);
            let abs = tape.abs(total);
            Ok(abs)
        };
        let x = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin() + 0.1).collect());
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn embed_scatter_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = tape.embed_rows(table, &[1, 1, 2]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn overwrite_row_zeroes_patched_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let patched = tape.overwrite_row(x, 0, &[9.0, 9.0]);
        assert_eq!(tape.value(patched).data(), &[9.0, 9.0, 3.0, 4.0]);
        let s = tape.sum(patched);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
