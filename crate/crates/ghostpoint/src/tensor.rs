//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: each operation executes immediately,
//! records enough state for its backward rule, and returns a [`TensorId`]
//! handle. [`Graph::backward`] walks the tape in reverse from a scalar seed
//! and accumulates exact gradients into every `requires_grad` node. The graph
//! is rebuilt from scratch every training step — there is no compiled or
//! cached form, which keeps the engine small enough to verify exhaustively
//! against finite differences.
//!
//! Shapes are explicit: matrix ops take rank-2 tensors, image ops rank-3
//! `[channels, height, width]`, elementwise ops any rank. All kernels are
//! single-threaded and bitwise deterministic.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: data length {got} does not match shape {shape:?}")]
    DataLength { op: &'static str, got: usize, shape: Vec<usize> },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {want}, got shape {shape:?}")]
    Rank { op: &'static str, want: usize, shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index range {start}..{end} out of bounds for extent {extent}")]
    Range { op: &'static str, start: usize, end: usize, extent: usize },
    #[error("backward requires a scalar seed, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the graph before differentiating again")]
    BackwardTwice,
    #[error("backward has not run; no gradients are available")]
    NoBackward,
    #[error("cross-entropy target index {target} out of range for {n} logits")]
    CeTarget { target: usize, n: usize },
    #[error("binary cross-entropy probability {0} outside the open interval (0,1)")]
    BceDomain(f64),
    #[error("rotate_pairs angles must be constants (cos/sin tensors cannot require gradients)")]
    AngleGrad,
    #[error("l2_normalize: row {row} has norm {norm:.3e}, below the minimum {min:.3e}")]
    DegenerateNorm { row: usize, norm: f64, min: f64 },
    #[error("gather index {index} out of range for table with {rows} rows")]
    GatherIndex { index: usize, rows: usize },
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    AddBias(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    RepeatRow(TensorId),
    GatherRows { table: TensorId, indices: Vec<usize> },
    RotatePairs { x: TensorId, cos: TensorId, sin: TensorId },
    Softmax(TensorId),
    L2NormalizeRows { x: TensorId, inv_norms: Vec<F> },
    Gelu(TensorId),
    Sigmoid(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, xhat: Vec<F>, inv_std: Vec<F> },
    Sum(TensorId),
    Mean(TensorId),
    Mse(TensorId, TensorId),
    CrossEntropy { logits: TensorId, probs: Vec<F> },
    Bce { p: TensorId, target: F },
    BceLogits { z: TensorId, target: F },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    UpsampleNearest2(TensorId),
    ChwToRows(TensorId),
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Define-by-run computation tape.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].value
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> F {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].value[0]
    }

    /// Gradient of `id` after [`Self::backward`]; `None` if the node does not
    /// require gradients.
    pub fn grad(&self, id: TensorId) -> Result<Option<&[F]>, TensorError> {
        if !self.backward_done {
            return Err(TensorError::NoBackward);
        }
        Ok(self.nodes[id.0].grad.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> TensorId {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Non-differentiable input (observations, positions, targets).
    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<TensorId, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength { op: "constant", got: data.len(), shape: shape.to_vec() });
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Differentiable leaf (a model parameter's per-step copy).
    pub fn param(&mut self, shape: &[usize], data: Vec<F>) -> Result<TensorId, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength { op: "param", got: data.len(), shape: shape.to_vec() });
        }
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn scalar(&mut self, v: F) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x - *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId, TensorError> {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|x| *x * c).collect();
        let rg = self.rg(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, rg, Op::Scale(a, c)))
    }

    /// `[r, c] + [c]`, broadcasting the bias across rows.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.rank2("add_bias", x)?;
        if self.nodes[b.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut value = self.nodes[x.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] = value[i * c + j] + self.nodes[b.0].value[j];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(vec![r, c], value, rg, Op::AddBias(x, b)))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    fn rank2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        let shape = &self.nodes[id.0].shape;
        if shape.len() != 2 {
            return Err(TensorError::Rank { op, want: 2, shape: shape.clone() });
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let a_il = av[i * k + l];
                let row_b = &bv[l * n..(l + 1) * n];
                let row_o = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    row_o[j] = row_o[j] + a_il * row_b[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.rank2("transpose", a)?;
        let av = &self.nodes[a.0].value;
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], value, rg, Op::Transpose(a)))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(TensorError::DataLength {
                op: "reshape",
                got: self.nodes[a.0].value.len(),
                shape: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    // ── Row/column structure ────────────────────────────────────────

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.rank2("slice_rows", x)?;
        if start + len > r {
            return Err(TensorError::Range { op: "slice_rows", start, end: start + len, extent: r });
        }
        let value = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], value, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.rank2("slice_cols", x)?;
        if start + len > c {
            return Err(TensorError::Range { op: "slice_cols", start, end: start + len, extent: c });
        }
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], value, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_rows" });
        }
        let (_, c) = self.rank2("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.rank2("concat_rows", p)?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            rows += r;
            value.extend_from_slice(&self.nodes[p.0].value);
            rg |= self.rg(p);
        }
        Ok(self.push(vec![rows, c], value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat_cols" });
        }
        let (r, _) = self.rank2("concat_cols", parts[0])?;
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.rank2("concat_cols", p)?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r, cols],
                    rhs: vec![pr, pc],
                });
            }
            cols += pc;
            rg |= self.rg(p);
        }
        let mut value = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.nodes[p.0].shape[1];
                value.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(vec![r, cols], value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Tile a `[c]` or `[1, c]` tensor into `[n, c]`.
    pub fn repeat_row(&mut self, x: TensorId, n: usize) -> Result<TensorId, TensorError> {
        let shape = &self.nodes[x.0].shape;
        let c = match shape.len() {
            1 => shape[0],
            2 if shape[0] == 1 => shape[1],
            _ => return Err(TensorError::Rank { op: "repeat_row", want: 1, shape: shape.clone() }),
        };
        if n == 0 {
            return Err(TensorError::Empty { op: "repeat_row" });
        }
        let mut value = Vec::with_capacity(n * c);
        for _ in 0..n {
            value.extend_from_slice(&self.nodes[x.0].value);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c], value, rg, Op::RepeatRow(x)))
    }

    /// Row lookup into an embedding table; duplicate indices accumulate
    /// gradient.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let (rows, c) = self.rank2("gather_rows", table)?;
        if indices.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let mut value = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::GatherIndex { index: ix, rows });
            }
            value.extend_from_slice(&self.nodes[table.0].value[ix * c..(ix + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), c],
            value,
            rg,
            Op::GatherRows { table, indices: indices.to_vec() },
        ))
    }

    // ── Rotary rotation ─────────────────────────────────────────────

    /// Rotate consecutive feature pairs of `x: [n, d]` by per-pair angles
    /// given as `cos, sin: [n, d/2]` constants. Pair `(2j, 2j+1)` of row `i`
    /// maps to `(a·cos − b·sin, a·sin + b·cos)`.
    pub fn rotate_pairs(&mut self, x: TensorId, cos: TensorId, sin: TensorId) -> Result<TensorId, TensorError> {
        let (n, d) = self.rank2("rotate_pairs", x)?;
        if d % 2 != 0 || self.nodes[cos.0].shape != [n, d / 2] || self.nodes[sin.0].shape != [n, d / 2] {
            return Err(TensorError::ShapeMismatch {
                op: "rotate_pairs",
                lhs: vec![n, d],
                rhs: self.nodes[cos.0].shape.clone(),
            });
        }
        if self.rg(cos) || self.rg(sin) {
            return Err(TensorError::AngleGrad);
        }
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[cos.0].value;
        let sv = &self.nodes[sin.0].value;
        let mut value = vec![F::zero(); n * d];
        for i in 0..n {
            for j in 0..d / 2 {
                let (a, b) = (xv[i * d + 2 * j], xv[i * d + 2 * j + 1]);
                let (c, s) = (cv[i * d / 2 + j], sv[i * d / 2 + j]);
                value[i * d + 2 * j] = a * c - b * s;
                value[i * d + 2 * j + 1] = a * s + b * c;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, d], value, rg, Op::RotatePairs { x, cos, sin }))
    }

    // ── Nonlinearities and normalization ────────────────────────────

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let last = *shape.last().ok_or(TensorError::Empty { op: "softmax" })?;
        if last == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let rows = numel(&shape) / last;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); rows * last];
        for i in 0..rows {
            let row = &xv[i * last..(i + 1) * last];
            let mut max = row[0];
            for v in row {
                if *v > max {
                    max = *v;
                }
            }
            let mut sum = F::zero();
            for j in 0..last {
                let e = (row[j] - max).exp();
                value[i * last + j] = e;
                sum = sum + e;
            }
            for j in 0..last {
                value[i * last + j] = value[i * last + j] / sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, value, rg, Op::Softmax(x)))
    }

    /// Row-wise L2 normalization along the last axis: `y = x/‖x‖₂`. A row
    /// whose norm falls below `min_norm` is rejected rather than divided —
    /// callers treat that as a degenerate prediction (e.g. a collapsed
    /// quaternion), not a recoverable state.
    pub fn l2_normalize(&mut self, x: TensorId, min_norm: F) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let last = *shape.last().ok_or(TensorError::Empty { op: "l2_normalize" })?;
        if last == 0 {
            return Err(TensorError::Empty { op: "l2_normalize" });
        }
        let rows = numel(&shape) / last;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); rows * last];
        let mut inv_norms = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &xv[i * last..(i + 1) * last];
            let mut sq = F::zero();
            for v in row {
                sq = sq + *v * *v;
            }
            let norm = sq.sqrt();
            if norm < min_norm {
                return Err(TensorError::DegenerateNorm {
                    row: i,
                    norm: norm.to_f64().unwrap_or(f64::NAN),
                    min: min_norm.to_f64().unwrap_or(f64::NAN),
                });
            }
            let inv = F::one() / norm;
            for j in 0..last {
                value[i * last + j] = row[j] * inv;
            }
            inv_norms.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, value, rg, Op::L2NormalizeRows { x, inv_norms }))
    }

    /// Smooth gelu (tanh form): `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let value: Vec<F> = self.nodes[x.0].value.iter().map(|v| gelu_value(*v)).collect();
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), value, rg, Op::Gelu(x)))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let value: Vec<F> = self.nodes[x.0].value.iter().map(|v| sigmoid_value(*v)).collect();
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), value, rg, Op::Sigmoid(x)))
    }

    /// Row-wise layer normalization with learned gain and bias over the last
    /// axis of `x: [r, c]`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: F) -> Result<TensorId, TensorError> {
        let (r, c) = self.rank2("layer_norm", x)?;
        if self.nodes[gain.0].shape != [c] || self.nodes[bias.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let cf = F::from_f64(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut value = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut mean = F::zero();
            for v in row {
                mean = mean + *v;
            }
            mean = mean / cf;
            let mut var = F::zero();
            for v in row {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / cf;
            let is = (var + eps).sqrt().recip();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                value[i * c + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(vec![r, c], value, rg, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    // ── Reductions and losses ───────────────────────────────────────

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = F::zero();
        for v in &self.nodes[x.0].value {
            acc = acc + *v;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![acc], rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean" });
        }
        let mut acc = F::zero();
        for v in &self.nodes[x.0].value {
            acc = acc + *v;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![acc / F::from_f64(n as f64)], rg, Op::Mean(x)))
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mse", a, b)?;
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mse" });
        }
        let mut acc = F::zero();
        for (x, y) in self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value) {
            let d = *x - *y;
            acc = acc + d * d;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![acc / F::from_f64(n as f64)], rg, Op::Mse(a, b)))
    }

    /// Softmax cross-entropy of rank-1 `logits` against a target index,
    /// computed as `logsumexp(logits) − logits[target]`.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId, TensorError> {
        let shape = &self.nodes[logits.0].shape;
        if shape.len() != 1 {
            return Err(TensorError::Rank { op: "cross_entropy", want: 1, shape: shape.clone() });
        }
        let n = shape[0];
        if target >= n {
            return Err(TensorError::CeTarget { target, n });
        }
        let z = &self.nodes[logits.0].value;
        let mut max = z[0];
        for v in z {
            if *v > max {
                max = *v;
            }
        }
        let mut sum = F::zero();
        let mut probs = vec![F::zero(); n];
        for j in 0..n {
            let e = (z[j] - max).exp();
            probs[j] = e;
            sum = sum + e;
        }
        for p in &mut probs {
            *p = *p / sum;
        }
        let loss = sum.ln() + max - z[target];
        let rg = self.rg(logits);
        let mut one_hot_sub = probs;
        let node = self.push(vec![1], vec![loss], rg, Op::CrossEntropy { logits, probs: Vec::new() });
        one_hot_sub[target] = one_hot_sub[target] - F::one();
        if let Op::CrossEntropy { probs, .. } = &mut self.nodes[node.0].op {
            *probs = one_hot_sub;
        }
        Ok(node)
    }

    /// Binary cross-entropy of probabilities already squashed into (0,1):
    /// mean of `−(t·ln p + (1−t)·ln(1−p))`.
    pub fn bce(&mut self, p: TensorId, target: F) -> Result<TensorId, TensorError> {
        let n = self.nodes[p.0].value.len();
        if n == 0 {
            return Err(TensorError::Empty { op: "bce" });
        }
        let mut acc = F::zero();
        for v in &self.nodes[p.0].value {
            if *v <= F::zero() || *v >= F::one() {
                return Err(TensorError::BceDomain(v.to_f64().unwrap_or(f64::NAN)));
            }
            acc = acc - (target * v.ln() + (F::one() - target) * (F::one() - *v).ln());
        }
        let rg = self.rg(p);
        Ok(self.push(vec![1], vec![acc / F::from_f64(n as f64)], rg, Op::Bce { p, target }))
    }

    /// Fused sigmoid + binary cross-entropy on raw logits, stable for any
    /// magnitude: mean of `max(z,0) − z·t + ln(1 + e^{−|z|})`.
    pub fn bce_logits(&mut self, z: TensorId, target: F) -> Result<TensorId, TensorError> {
        let n = self.nodes[z.0].value.len();
        if n == 0 {
            return Err(TensorError::Empty { op: "bce_logits" });
        }
        let mut acc = F::zero();
        for v in &self.nodes[z.0].value {
            let pos = if *v > F::zero() { *v } else { F::zero() };
            acc = acc + pos - *v * target + (-(v.abs())).exp().ln_1p();
        }
        let rg = self.rg(z);
        Ok(self.push(vec![1], vec![acc / F::from_f64(n as f64)], rg, Op::BceLogits { z, target }))
    }

    // ── Image ops ───────────────────────────────────────────────────

    fn rank3(&self, op: &'static str, id: TensorId) -> Result<(usize, usize, usize), TensorError> {
        let shape = &self.nodes[id.0].shape;
        if shape.len() != 3 {
            return Err(TensorError::Rank { op, want: 3, shape: shape.clone() });
        }
        Ok((shape[0], shape[1], shape[2]))
    }

    /// 2D convolution of `x: [c_in, h, w]` with `w: [c_out, c_in, kh, kw]`
    /// and `b: [c_out]`, zero padding, floor output sizing.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let (ci, h, wd) = self.rank3("conv2d", x)?;
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 4 || wshape[1] != ci {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: vec![ci, h, wd], rhs: wshape });
        }
        let (co, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        if self.nodes[b.0].shape != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![co],
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(TensorError::Empty { op: "conv2d" });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![F::zero(); co * oh * ow];
        for c in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bv[c];
                    for ic in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + xv[(ic * h + iy as usize) * wd + ix as usize]
                                        * wv[((c * ci + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    value[(c * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![co, oh, ow], value, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Nearest-neighbor 2× spatial upsampling of `[c, h, w]`.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (c, h, w) = self.rank3("upsample_nearest2", x)?;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x2 in 0..2 * w {
                    value[(ch * 2 * h + y) * 2 * w + x2] = xv[(ch * h + y / 2) * w + x2 / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, 2 * h, 2 * w], value, rg, Op::UpsampleNearest2(x)))
    }

    /// Flatten a `[c, h, w]` feature map into `[h·w, c]` token rows in
    /// row-major spatial order.
    pub fn chw_to_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (c, h, w) = self.rank3("chw_to_rows", x)?;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![F::zero(); h * w * c];
        for ch in 0..c {
            for p in 0..h * w {
                value[p * c + ch] = xv[ch * h * w + p];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![h * w, c], value, rg, Op::ChwToRows(x)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar seed. Runs exactly once per graph;
    /// the dynamic-tape design has no reset — build a fresh graph instead.
    pub fn backward(&mut self, seed: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if numel(&self.nodes[seed.0].shape) != 1 {
            return Err(TensorError::NonScalarSeed(self.nodes[seed.0].shape.clone()));
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![F::zero(); node.value.len()]);
            }
        }
        self.backward_done = true;
        if !self.nodes[seed.0].requires_grad {
            // Seed does not depend on any parameter; all gradients are zero.
            return Ok(());
        }
        self.nodes[seed.0].grad.as_mut().unwrap()[0] = F::one();
        for i in (0..=seed.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            let contribs = self.op_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (id, c) in contribs {
                let buf = self.nodes[id.0].grad.as_mut().unwrap();
                for (dst, src) in buf.iter_mut().zip(&c) {
                    *dst = *dst + *src;
                }
            }
        }
        Ok(())
    }

    /// Per-op vector-Jacobian products. Only inputs with `requires_grad` get
    /// a contribution.
    fn op_backward(&self, i: usize, g: &[F]) -> Vec<(TensorId, Vec<F>)> {
        let mut out: Vec<(TensorId, Vec<F>)> = Vec::new();
        let val = |id: TensorId| -> &[F] { &self.nodes[id.0].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().map(|v| -*v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(gv, bv)| *gv * *bv).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(gv, av)| *gv * *av).collect()));
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    out.push((*a, g.iter().map(|v| *v * *c).collect()));
                }
            }
            Op::AddBias(x, b) => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if self.rg(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); c];
                    for row in 0..r {
                        for j in 0..c {
                            db[j] = db[j] + g[row * c + j];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(*a) {
                    // dA = G·Bᵀ
                    let bv = val(*b);
                    let mut da = vec![F::zero(); m * k];
                    for ii in 0..m {
                        for l in 0..k {
                            let mut s = F::zero();
                            let row_g = &g[ii * n..(ii + 1) * n];
                            let row_b = &bv[l * n..(l + 1) * n];
                            for j in 0..n {
                                s = s + row_g[j] * row_b[j];
                            }
                            da[ii * k + l] = s;
                        }
                    }
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ·G
                    let av = val(*a);
                    let mut db = vec![F::zero(); k * n];
                    for ii in 0..m {
                        for l in 0..k {
                            let a_il = av[ii * k + l];
                            let row_g = &g[ii * n..(ii + 1) * n];
                            let row_d = &mut db[l * n..(l + 1) * n];
                            for j in 0..n {
                                row_d[j] = row_d[j] + a_il * row_g[j];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![F::zero(); m * n];
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] = g[r * m + c];
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let (_, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let mut dx = vec![F::zero(); self.nodes[x.0].value.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let len = self.nodes[i].shape[1];
                    let mut dx = vec![F::zero(); r * c];
                    for row in 0..r {
                        for j in 0..len {
                            dx[row * c + start + j] = g[row * len + j];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if self.rg(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    if self.rg(p) {
                        let mut dp = vec![F::zero(); r * pc];
                        for row in 0..r {
                            dp[row * pc..(row + 1) * pc]
                                .copy_from_slice(&g[row * total + offset..row * total + offset + pc]);
                        }
                        out.push((p, dp));
                    }
                    offset += pc;
                }
            }
            Op::RepeatRow(x) => {
                if self.rg(*x) {
                    let c = self.nodes[x.0].value.len();
                    let n = self.nodes[i].shape[0];
                    let mut dx = vec![F::zero(); c];
                    for row in 0..n {
                        for j in 0..c {
                            dx[j] = dx[j] + g[row * c + j];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::GatherRows { table, indices } => {
                if self.rg(*table) {
                    let c = self.nodes[table.0].shape[1];
                    let mut dt = vec![F::zero(); self.nodes[table.0].value.len()];
                    for (row, &ix) in indices.iter().enumerate() {
                        for j in 0..c {
                            dt[ix * c + j] = dt[ix * c + j] + g[row * c + j];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::RotatePairs { x, cos, sin } => {
                if self.rg(*x) {
                    let (n, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let cv = val(*cos);
                    let sv = val(*sin);
                    let mut dx = vec![F::zero(); n * d];
                    for r in 0..n {
                        for j in 0..d / 2 {
                            let (g0, g1) = (g[r * d + 2 * j], g[r * d + 2 * j + 1]);
                            let (c, s) = (cv[r * d / 2 + j], sv[r * d / 2 + j]);
                            // Inverse rotation applied to the output gradient pair.
                            dx[r * d + 2 * j] = g0 * c + g1 * s;
                            dx[r * d + 2 * j + 1] = -g0 * s + g1 * c;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = &self.nodes[i].value;
                    let last = *self.nodes[i].shape.last().unwrap();
                    let rows = y.len() / last;
                    let mut dx = vec![F::zero(); y.len()];
                    for r in 0..rows {
                        let mut dot = F::zero();
                        for j in 0..last {
                            dot = dot + g[r * last + j] * y[r * last + j];
                        }
                        for j in 0..last {
                            dx[r * last + j] = y[r * last + j] * (g[r * last + j] - dot);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::L2NormalizeRows { x, inv_norms } => {
                if self.rg(*x) {
                    // y = x/r ⇒ dx = (g − (g·y) y)/r, the projection of g onto
                    // the tangent space of the unit sphere, scaled by 1/r.
                    let y = &self.nodes[i].value;
                    let last = *self.nodes[i].shape.last().unwrap();
                    let rows = y.len() / last;
                    let mut dx = vec![F::zero(); y.len()];
                    for r in 0..rows {
                        let mut dot = F::zero();
                        for j in 0..last {
                            dot = dot + g[r * last + j] * y[r * last + j];
                        }
                        for j in 0..last {
                            dx[r * last + j] =
                                inv_norms[r] * (g[r * last + j] - dot * y[r * last + j]);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let dx = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| gelu_derivative(*v) * *gv)
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let y = &self.nodes[i].value;
                    let dx = y.iter().zip(g).map(|(yv, gv)| *yv * (F::one() - *yv) * *gv).collect();
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let cf = F::from_f64(c as f64);
                if self.rg(*x) {
                    let gv = val(*gain);
                    let mut dx = vec![F::zero(); r * c];
                    for row in 0..r {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dh = g[row * c + j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[row * c + j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            let dh = g[row * c + j] * gv[j];
                            dx[row * c + j] = inv_std[row] * (dh - m1 - xhat[row * c + j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gain) {
                    let mut dg = vec![F::zero(); c];
                    for row in 0..r {
                        for j in 0..c {
                            dg[j] = dg[j] + g[row * c + j] * xhat[row * c + j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.rg(*bias) {
                    let mut db = vec![F::zero(); c];
                    for row in 0..r {
                        for j in 0..c {
                            db[j] = db[j] + g[row * c + j];
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    out.push((*x, vec![g[0]; self.nodes[x.0].value.len()]));
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.nodes[x.0].value.len();
                    out.push((*x, vec![g[0] / F::from_f64(n as f64); n]));
                }
            }
            Op::Mse(a, b) => {
                let n = self.nodes[a.0].value.len();
                let scale = F::from_f64(2.0 / n as f64) * g[0];
                if self.rg(*a) {
                    let da = val(*a)
                        .iter()
                        .zip(val(*b))
                        .map(|(x, y)| (*x - *y) * scale)
                        .collect();
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let db = val(*a)
                        .iter()
                        .zip(val(*b))
                        .map(|(x, y)| (*y - *x) * scale)
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::CrossEntropy { logits, probs } => {
                if self.rg(*logits) {
                    out.push((*logits, probs.iter().map(|p| *p * g[0]).collect()));
                }
            }
            Op::Bce { p, target } => {
                if self.rg(*p) {
                    let n = F::from_f64(self.nodes[p.0].value.len() as f64);
                    let dp = val(*p)
                        .iter()
                        .map(|v| ((F::one() - *target) / (F::one() - *v) - *target / *v) * g[0] / n)
                        .collect();
                    out.push((*p, dp));
                }
            }
            Op::BceLogits { z, target } => {
                if self.rg(*z) {
                    let n = F::from_f64(self.nodes[z.0].value.len() as f64);
                    let dz = val(*z)
                        .iter()
                        .map(|v| (sigmoid_value(*v) - *target) * g[0] / n)
                        .collect();
                    out.push((*z, dz));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (ci, h, wd) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let (co, kh, kw) = {
                    let s = &self.nodes[w.0].shape;
                    (s[0], s[2], s[3])
                };
                let (oh, ow) = (self.nodes[i].shape[1], self.nodes[i].shape[2]);
                let xv = val(*x);
                let wv = val(*w);
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dx = if need_x { vec![F::zero(); ci * h * wd] } else { Vec::new() };
                let mut dw = if need_w { vec![F::zero(); co * ci * kh * kw] } else { Vec::new() };
                for c in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(c * oh + oy) * ow + ox];
                            for ic in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ic * h + iy as usize) * wd + ix as usize;
                                        let wi = ((c * ci + ic) * kh + ky) * kw + kx;
                                        if need_x {
                                            dx[xi] = dx[xi] + gv * wv[wi];
                                        }
                                        if need_w {
                                            dw[wi] = dw[wi] + gv * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    out.push((*x, dx));
                }
                if need_w {
                    out.push((*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); co];
                    for c in 0..co {
                        for p in 0..oh * ow {
                            db[c] = db[c] + g[c * oh * ow + p];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.rg(*x) {
                    let (c, h, w) = {
                        let s = &self.nodes[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let mut dx = vec![F::zero(); c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x2 in 0..2 * w {
                                let src = (ch * h + y / 2) * w + x2 / 2;
                                dx[src] = dx[src] + g[(ch * 2 * h + y) * 2 * w + x2];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::ChwToRows(x) => {
                if self.rg(*x) {
                    let (c, h, w) = {
                        let s = &self.nodes[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let mut dx = vec![F::zero(); c * h * w];
                    for ch in 0..c {
                        for p in 0..h * w {
                            dx[ch * h * w + p] = g[p * c + ch];
                        }
                    }
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

fn sigmoid_value<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C1: f64 = 0.044_715;

fn gelu_value<F: Scalar>(x: F) -> F {
    let c0 = F::from_f64(GELU_C0);
    let c1 = F::from_f64(GELU_C1);
    let half = F::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c0 = F::from_f64(GELU_C0);
    let c1 = F::from_f64(GELU_C1);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c0 * (F::one() + three * c1 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = G::new();
        let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = G::new();
        let a = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = G::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut g = G::new();
        use rand::Rng;
        let mut rng = crate::util::rng_stream(11, "matmul-oracle", 0);
        let av: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = g.constant(&[3, 4], av.clone()).unwrap();
        let b = g.constant(&[4, 2], bv.clone()).unwrap();
        let out = g.matmul(a, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for l in 0..4 {
                    s += av[i * 4 + l] * bv[l * 2 + j];
                }
                assert!((g.value(out)[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = G::new();
        let x = g.constant(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = G::new();
        let x = g.constant(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let mut g = G::new();
        use rand::Rng;
        let mut rng = crate::util::rng_stream(11, "softmax-oracle", 0);
        let xv: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = g.constant(&[5], xv.clone()).unwrap();
        let y = g.softmax(x).unwrap();
        let z: f64 = xv.iter().map(|v| v.exp()).sum();
        for (out, v) in g.value(y).iter().zip(&xv) {
            assert!((out - v.exp() / z).abs() < 1e-12);
        }
        let sum: f64 = g.value(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut g = G::new();
        let x = g.constant(&[2, 2], vec![3.0, 4.0, 0.0, -2.0]).unwrap();
        let y = g.l2_normalize(x, 1e-8).unwrap();
        for (got, want) in g.value(y).iter().zip([0.6, 0.8, 0.0, -1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_rejects_degenerate_row() {
        let mut g = G::new();
        let x = g.constant(&[2, 2], vec![1.0, 0.0, 1e-12, 0.0]).unwrap();
        let err = g.l2_normalize(x, 1e-8).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateNorm { row: 1, .. }));
    }

    #[test]
    fn l2_normalize_gradient_is_tangent_to_sphere() {
        // dx = (g − (g·y)y)/r lies in the tangent space at y, so dx·y = 0
        // and shrinking x toward the origin scales the gradient up by 1/r.
        let mut g = G::new();
        let xv = vec![0.3, -1.2, 0.7, 0.4];
        let x = g.param(&[1, 4], xv.clone()).unwrap();
        let y = g.l2_normalize(x, 1e-8).unwrap();
        let w = g.constant(&[1, 4], vec![0.9, -0.2, 0.5, 1.3]).unwrap();
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let yv = g.value(y).to_vec();
        let dx = g.grad(x).unwrap().unwrap();
        let dot: f64 = dx.iter().zip(&yv).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = G::new();
        let a = g.constant(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = g.constant(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn bce_of_half_is_ln_two() {
        let mut g = G::new();
        let p = g.constant(&[1], vec![0.5]).unwrap();
        let l = g.bce(p, 1.0).unwrap();
        assert!((g.scalar_value(l) - 0.693_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_out_of_domain_probability() {
        let mut g = G::new();
        let p = g.constant(&[1], vec![1.0]).unwrap();
        assert!(matches!(g.bce(p, 1.0), Err(TensorError::BceDomain(_))));
    }

    #[test]
    fn bce_logits_matches_sigmoid_composition() {
        let mut g = G::new();
        for (z, t) in [(0.0, 1.0), (2.5, 0.0), (-3.0, 1.0), (40.0, 1.0)] {
            let zt = g.constant(&[1], vec![z]).unwrap();
            let fused = g.bce_logits(zt, t).unwrap();
            let expected = (if z > 0.0 { z } else { 0.0 }) - z * t + (-z.abs() as f64).exp().ln_1p();
            assert!((g.scalar_value(fused) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax_oracle() {
        let mut g = G::new();
        let z = g.constant(&[3], vec![10.0, 0.0, 0.0]).unwrap();
        let l = g.cross_entropy(z, 0).unwrap();
        // −log softmax([10,0,0])[0], evaluated with 50-digit mpmath.
        assert!((g.scalar_value(l) - 9.079_573_746_724_444_6e-5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_certain_prediction_is_zero() {
        let mut g = G::new();
        let z = g.constant(&[2], vec![200.0, -200.0]).unwrap();
        let l = g.cross_entropy(z, 0).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = G::new();
        let z = g.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            g.cross_entropy(z, 3),
            Err(TensorError::CeTarget { target: 3, n: 3 })
        ));
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut g = G::new();
        let x = g.param(&[1], vec![3.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().unwrap(), &[6.0]);
    }

    #[test]
    fn backward_of_matmul_sum_is_ones_bt() {
        let mut g = G::new();
        let a = g.param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let m = g.matmul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        // d/dA Σ(AB) = 1·Bᵀ: row i gets the row sums of B.
        assert_eq!(g.grad(a).unwrap().unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = G::new();
        let x = g.param(&[1], vec![1.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut g = G::new();
        let x = g.param(&[2], vec![1.0, 2.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarSeed(_))));
    }

    #[test]
    fn grad_before_backward_is_rejected() {
        let mut g = G::new();
        let x = g.param(&[1], vec![1.0]).unwrap();
        assert!(matches!(g.grad(x), Err(TensorError::NoBackward)));
    }

    #[test]
    fn rotate_pairs_rejects_differentiable_angles() {
        let mut g = G::new();
        let x = g.param(&[1, 2], vec![1.0, 0.0]).unwrap();
        let c = g.param(&[1, 1], vec![1.0]).unwrap();
        let s = g.constant(&[1, 1], vec![0.0]).unwrap();
        assert!(matches!(g.rotate_pairs(x, c, s), Err(TensorError::AngleGrad)));
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut g = G::new();
        let t = g.param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let picked = g.gather_rows(t, &[0, 0, 1]).unwrap();
        let s = g.sum(picked).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap().unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn conv2d_shapes_follow_floor_rule() {
        let mut g = G::new();
        let x = g.constant(&[1, 64, 64], vec![0.0; 64 * 64]).unwrap();
        let w = g.constant(&[2, 1, 3, 3], vec![0.0; 18]).unwrap();
        let b = g.constant(&[2], vec![0.0; 2]).unwrap();
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 32, 32]);
    }

    #[test]
    fn conv2d_identity_kernel_recovers_input() {
        let mut g = G::new();
        let xv: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = g.constant(&[1, 4, 4], xv.clone()).unwrap();
        // 3×3 kernel with a 1 in the center is the identity at stride 1, pad 1.
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = g.constant(&[1, 1, 3, 3], wv).unwrap();
        let b = g.constant(&[1], vec![0.0]).unwrap();
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), xv.as_slice());
    }

    #[test]
    fn chw_to_rows_transposes_layout() {
        let mut g = G::new();
        let x = g.constant(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.chw_to_rows(x).unwrap();
        assert_eq!(g.shape(y), &[2, 2]);
        assert_eq!(g.value(y), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn upsample_nearest_doubles_each_axis() {
        let mut g = G::new();
        let x = g.constant(&[1, 1, 2], vec![5.0, 7.0]).unwrap();
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4]);
        assert_eq!(g.value(y), &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut g = G::new();
        let x = g.constant(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gain = g.constant(&[4], vec![1.0; 4]).unwrap();
        let bias = g.constant(&[4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        let out = g.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_only_graph_has_zero_gradients() {
        let mut g = G::new();
        let x = g.constant(&[1], vec![2.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(x).unwrap().is_none());
    }
}
