//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations execute eagerly and are recorded on a [`Tape`]; `backward`
//! replays them once in reverse, accumulating vector-Jacobian products.
//! A tape lives for one forward/backward pass and is then discarded —
//! there are no higher-order derivatives.

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
pub type VarId = usize;

// ── Kernels ──────────────────────────────────────────────────────────

/// out += a[m×k] · b[k×n]
fn matmul_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

/// out += a[m×n] · b[k×n]^T  (so out is m×k)
fn matmul_nt_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc = acc + a_row[j] * b_row[j];
            }
            out[i * k + kk] = out[i * k + kk] + acc;
        }
    }
}

/// out += a[m×k]^T · b[m×n]  (so out is k×n)
fn matmul_tn_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

fn softmax_rows_kernel<F: Element>(
    x: &[F],
    allowed: Option<&[bool]>,
    rows: usize,
    cols: usize,
) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let is_allowed = |j: usize| allowed.is_none_or(|m| m[r * cols + j]);
        let mut max = F::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if is_allowed(j) && v > max {
                max = v;
            }
        }
        if max == F::neg_infinity() {
            return Err(Error::Config(
                "softmax row has no allowed positions".into(),
            ));
        }
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut sum = F::zero();
        for (j, &v) in row.iter().enumerate() {
            if is_allowed(j) {
                let e = (v - max).exp();
                out_row[j] = e;
                sum = sum + e;
            }
        }
        for v in out_row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

// ── Recorded operations ──────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op<F: Element> {
    Leaf,
    /// out = a[m×k] · b[k×n]
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    /// out = x^T for a 2-D x (last two dims swapped)
    Transpose2d { x: VarId, rows: usize, cols: usize },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, c: F },
    AddScalar { x: VarId },
    /// out[r][j] = x[r][j] + bias[j]
    AddRowBroadcast { x: VarId, bias: VarId, rows: usize, cols: usize },
    Relu { x: VarId },
    /// Σ|x|; subgradient sign(x), 0 at exactly 0
    L1Norm { x: VarId },
    Sum { x: VarId },
    Mean { x: VarId },
    /// Row softmax; `allowed=None` means every position participates.
    /// Disallowed positions produce exact zeros.
    SoftmaxRows {
        x: VarId,
        rows: usize,
        cols: usize,
        allowed: Option<Vec<bool>>,
    },
    /// Mean over (row, target) pairs of −log softmax(row)[target].
    CrossEntropy {
        logits: VarId,
        rows: usize,
        cols: usize,
        targets: Vec<(usize, usize)>,
    },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        rows: usize,
        cols: usize,
        eps: F,
    },
    /// Row gather from a [vocab×dim] table; backward scatter-adds.
    Embedding {
        table: VarId,
        ids: Vec<usize>,
        dim: usize,
    },
    /// Column-wise concat of same-height parts.
    ConcatCols {
        parts: Vec<VarId>,
        widths: Vec<usize>,
        rows: usize,
    },
    SliceCols {
        x: VarId,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    /// Σ over rows of −Σ_j x ln x (natural log, 0·ln 0 = 0).
    RowEntropySum { x: VarId },
    /// Zero row entries below a threshold and renormalize; keeps the row
    /// argmax when everything falls below. Gradient barrier: constraints
    /// are inference-time only and propagate no gradient.
    ThresholdRenormRows,
}

struct Node<F: Element> {
    op: Op<F>,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
}

/// Wengert list: eager values plus enough structure to replay in reverse.
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> VarId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        id
    }

    fn needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Register a tensor as a leaf. Data is copied; gradient tracking
    /// follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<F>) -> VarId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Register a non-differentiable constant from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<VarId> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &[F] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value_tensor(&self, id: VarId) -> Tensor<F> {
        Tensor::from_vec(self.nodes[id].shape.clone(), self.nodes[id].data.clone())
            .expect("tape values are well-formed")
    }

    /// Scalar value of a 1-element var.
    pub fn scalar_value(&self, id: VarId) -> F {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn grad(&self, id: VarId) -> Option<&[F]> {
        self.grads[id].as_deref()
    }

    /// Gradient of a leaf, zeros if no path reached it.
    pub fn grad_or_zeros(&self, id: VarId) -> Vec<F> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![F::zero(); self.nodes[id].data.len()],
        }
    }

    fn shape2d(&self, id: VarId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.clone(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.shape2d(a, "matmul")?;
        let (k2, n) = self.shape2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.nodes[a].data, &self.nodes[b].data, &mut out, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], out, rg))
    }

    pub fn transpose2d(&mut self, x: VarId) -> Result<VarId> {
        let (rows, cols) = self.shape2d(x, "transpose2d")?;
        let src = &self.nodes[x].data;
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Transpose2d { x, rows, cols }, vec![cols, rows], out, rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<F> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Add { a, b }, shape, out, rg))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<F> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, shape, out, rg))
    }

    pub fn scale(&mut self, x: VarId, c: F) -> VarId {
        let out: Vec<F> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Scale { x, c }, shape, out, rg)
    }

    pub fn add_scalar(&mut self, x: VarId, c: F) -> VarId {
        let out: Vec<F> = self.nodes[x].data.iter().map(|&v| v + c).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::AddScalar { x }, shape, out, rg)
    }

    /// Broadcast a length-`cols` bias over every row of a 2-D x.
    /// The only broadcasting form supported.
    pub fn add_row_broadcast(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (rows, cols) = self.shape2d(x, "add_row_broadcast")?;
        if self.nodes[bias].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.nodes[x].shape.clone(),
                right: self.nodes[bias].shape.clone(),
            });
        }
        let b = &self.nodes[bias].data;
        let out: Vec<F> = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(
            Op::AddRowBroadcast { x, bias, rows, cols },
            vec![rows, cols],
            out,
            rg,
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out: Vec<F> = self.nodes[x]
            .data
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Relu { x }, shape, out, rg)
    }

    pub fn l1_norm(&mut self, x: VarId) -> VarId {
        let s = self.nodes[x]
            .data
            .iter()
            .fold(F::zero(), |acc, &v| acc + v.abs());
        let rg = self.needs_grad(&[x]);
        self.push(Op::L1Norm { x }, vec![1], vec![s], rg)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s = self.nodes[x].data.iter().fold(F::zero(), |acc, &v| acc + v);
        let rg = self.needs_grad(&[x]);
        self.push(Op::Sum { x }, vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.nodes[x].data.len();
        let s = self.nodes[x].data.iter().fold(F::zero(), |acc, &v| acc + v);
        let m = s / F::from_f64(n as f64);
        let rg = self.needs_grad(&[x]);
        self.push(Op::Mean { x }, vec![1], vec![m], rg)
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        self.softmax_rows_inner(x, None)
    }

    /// Softmax restricted to `allowed` positions; the rest are exact zeros.
    pub fn softmax_rows_masked(&mut self, x: VarId, allowed: &[bool]) -> Result<VarId> {
        self.softmax_rows_inner(x, Some(allowed))
    }

    fn softmax_rows_inner(&mut self, x: VarId, allowed: Option<&[bool]>) -> Result<VarId> {
        let shape = self.nodes[x].shape.clone();
        let cols = *shape.last().ok_or(Error::ShapeMismatch {
            op: "softmax_rows",
            left: shape.clone(),
            right: vec![],
        })?;
        let rows = self.nodes[x].data.len() / cols;
        if let Some(m) = allowed {
            if m.len() != rows * cols {
                return Err(Error::DataLength {
                    expected: rows * cols,
                    got: m.len(),
                });
            }
        }
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
            });
        }
        let out = softmax_rows_kernel(&self.nodes[x].data, allowed, rows, cols)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Op::SoftmaxRows {
                x,
                rows,
                cols,
                allowed: allowed.map(|m| m.to_vec()),
            },
            shape,
            out,
            rg,
        ))
    }

    /// Mean of −log softmax(logits)[target] over (row, class) pairs.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[(usize, usize)]) -> Result<VarId> {
        let (rows, cols) = self.shape2d(logits, "cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::Config("cross_entropy needs at least one target".into()));
        }
        for &(r, t) in targets {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy row",
                    index: r,
                    bound: rows,
                });
            }
            if t >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: cols,
                });
            }
        }
        let data = &self.nodes[logits].data;
        let mut total = F::zero();
        for &(r, t) in targets {
            let row = &data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &v in row {
                sum = sum + (v - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - row[t]);
        }
        let loss = total / F::from_f64(targets.len() as f64);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                rows,
                cols,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (rows, cols) = self.shape2d(x, "layer_norm")?;
        if self.nodes[gamma].shape != [cols] || self.nodes[beta].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.nodes[x].shape.clone(),
                right: self.nodes[gamma].shape.clone(),
            });
        }
        let eps = F::from_f64(eps);
        let inv_n = F::one() / F::from_f64(cols as f64);
        let mut out = vec![F::zero(); rows * cols];
        {
            let x_data = &self.nodes[x].data;
            let g = &self.nodes[gamma].data;
            let b = &self.nodes[beta].data;
            for r in 0..rows {
                let row = &x_data[r * cols..(r + 1) * cols];
                let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_n;
                let var = row
                    .iter()
                    .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                    * inv_n;
                let inv_std = F::one() / (var + eps).sqrt();
                let out_row = &mut out[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    out_row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                eps,
            },
            vec![rows, cols],
            out,
            rg,
        ))
    }

    /// Gather rows of a [vocab×dim] table.
    pub fn embedding(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (vocab, dim) = self.shape2d(table, "embedding")?;
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    bound: vocab,
                });
            }
        }
        let mut out = vec![F::zero(); ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            out[r * dim..(r + 1) * dim]
                .copy_from_slice(&self.nodes[table].data[id * dim..(id + 1) * dim]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            vec![ids.len(), dim],
            out,
            rg,
        ))
    }

    /// Concatenate 2-D parts of equal height along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols needs at least one part".into()));
        }
        let (rows, _) = self.shape2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2d(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0]].shape.clone(),
                    right: self.nodes[p].shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p].data;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
                rows,
            },
            vec![rows, total],
            out,
            rg,
        ))
    }

    /// Take columns `[start, start+len)` of a 2-D x.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.shape2d(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::IndexOutOfRange {
                what: "column slice end",
                index: start + len,
                bound: cols + 1,
            });
        }
        let src = &self.nodes[x].data;
        let mut out = vec![F::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            },
            vec![rows, len],
            out,
            rg,
        ))
    }

    /// Σ over rows of the natural-log entropy −Σ_j p ln p, with 0·ln 0 = 0.
    /// Input is expected to hold nonnegative row distributions.
    pub fn row_entropy_sum(&mut self, x: VarId) -> Result<VarId> {
        self.shape2d(x, "row_entropy_sum")?;
        let mut total = F::zero();
        for &v in &self.nodes[x].data {
            if v > F::zero() {
                total = total - v * v.ln();
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::RowEntropySum { x }, vec![1], vec![total], rg))
    }

    /// Zero entries `< threshold` per row and renormalize to sum 1; if a
    /// whole row falls below, keep its maximum (ties to the lower index).
    /// No gradient flows through this op.
    pub fn threshold_renorm_rows(&mut self, x: VarId, threshold: f64) -> Result<VarId> {
        let (rows, cols) = self.shape2d(x, "threshold_renorm_rows")?;
        let src = self.nodes[x].data.clone();
        if threshold <= 0.0 {
            // exact identity, no renormalization drift
            return Ok(self.push(Op::ThresholdRenormRows, vec![rows, cols], src, false));
        }
        let thr = F::from_f64(threshold);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let out_row = &mut out[r * cols..(r + 1) * cols];
            let mut sum = F::zero();
            for j in 0..cols {
                if row[j] >= thr {
                    out_row[j] = row[j];
                    sum = sum + row[j];
                }
            }
            if sum == F::zero() {
                let mut best = 0;
                for j in 1..cols {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out_row[best] = F::one();
            } else {
                for v in out_row.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        Ok(self.push(Op::ThresholdRenormRows, vec![rows, cols], out, false))
    }

    // ── Backward ─────────────────────────────────────────────────

    fn accumulate(&mut self, id: VarId, grad: Vec<F>) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e = *e + g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Reverse pass from a scalar loss. Visits every recorded op exactly
    /// once, newest first; gradients from multiple uses of a value add.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (scalar loss required)",
                left: self.nodes[loss].shape.clone(),
                right: vec![1],
            });
        }
        self.grads[loss] = Some(vec![F::one()]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].clone() else {
                continue;
            };
            self.backward_op(id, &g);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: VarId, g: &[F]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::ThresholdRenormRows => {}
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[a].requires_grad {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt_acc(g, &self.nodes[b].data, &mut da, m, n, k);
                    self.accumulate(a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn_acc(&self.nodes[a].data, g, &mut db, m, k, n);
                    self.accumulate(b, db);
                }
            }
            Op::Transpose2d { x, rows, cols } => {
                // forward output is cols×rows; transpose the gradient back
                let mut dx = vec![F::zero(); rows * cols];
                for c in 0..cols {
                    for r in 0..rows {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Add { a, b } => {
                if self.nodes[a].requires_grad {
                    self.accumulate(a, g.to_vec());
                }
                if self.nodes[b].requires_grad {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let da: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<F> = g.iter().map(|&gv| gv * c).collect();
                self.accumulate(x, dx);
            }
            Op::AddScalar { x } => {
                self.accumulate(x, g.to_vec());
            }
            Op::AddRowBroadcast { x, bias, rows, cols } => {
                if self.nodes[x].requires_grad {
                    self.accumulate(x, g.to_vec());
                }
                if self.nodes[bias].requires_grad {
                    let mut db = vec![F::zero(); cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] = db[j] + g[r * cols + j];
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::L1Norm { x } => {
                let gs = g[0];
                let dx: Vec<F> = self.nodes[x]
                    .data
                    .iter()
                    .map(|&v| {
                        if v > F::zero() {
                            gs
                        } else if v < F::zero() {
                            -gs
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Sum { x } => {
                let gs = g[0];
                let dx = vec![gs; self.nodes[x].data.len()];
                self.accumulate(x, dx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x].data.len();
                let gs = g[0] / F::from_f64(n as f64);
                let dx = vec![gs; n];
                self.accumulate(x, dx);
            }
            Op::SoftmaxRows { x, rows, cols, allowed } => {
                let y = &self.nodes[id].data;
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let y_row = &y[r * cols..(r + 1) * cols];
                    let g_row = &g[r * cols..(r + 1) * cols];
                    let mut dot = F::zero();
                    for j in 0..cols {
                        dot = dot + g_row[j] * y_row[j];
                    }
                    let dx_row = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let in_support = allowed
                            .as_ref()
                            .is_none_or(|m| m[r * cols + j]);
                        if in_support {
                            dx_row[j] = y_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::CrossEntropy {
                logits,
                rows,
                cols,
                targets,
            } => {
                let gs = g[0] / F::from_f64(targets.len() as f64);
                let data = self.nodes[logits].data.clone();
                let mut dx = vec![F::zero(); rows * cols];
                for &(r, t) in &targets {
                    let row = &data[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for &v in row {
                        sum = sum + (v - max).exp();
                    }
                    let dx_row = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let p = (row[j] - max).exp() / sum;
                        let indicator = if j == t { F::one() } else { F::zero() };
                        dx_row[j] = dx_row[j] + gs * (p - indicator);
                    }
                }
                self.accumulate(logits, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                eps,
            } => {
                let inv_n = F::one() / F::from_f64(cols as f64);
                let x_data = self.nodes[x].data.clone();
                let g_data = self.nodes[gamma].data.clone();
                let mut dx = vec![F::zero(); rows * cols];
                let mut dgamma = vec![F::zero(); cols];
                let mut dbeta = vec![F::zero(); cols];
                for r in 0..rows {
                    let row = &x_data[r * cols..(r + 1) * cols];
                    let g_row = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_n;
                    let var = row
                        .iter()
                        .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_n;
                    let inv_std = F::one() / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv_std
                    let mut sum_gg = F::zero(); // Σ γ_j g_j
                    let mut sum_ggx = F::zero(); // Σ γ_j g_j xhat_j
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        let gg = g_data[j] * g_row[j];
                        sum_gg = sum_gg + gg;
                        sum_ggx = sum_ggx + gg * xhat;
                        dgamma[j] = dgamma[j] + g_row[j] * xhat;
                        dbeta[j] = dbeta[j] + g_row[j];
                    }
                    let mean_gg = sum_gg * inv_n;
                    let mean_ggx = sum_ggx * inv_n;
                    let dx_row = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        dx_row[j] =
                            (g_data[j] * g_row[j] - mean_gg - xhat * mean_ggx) * inv_std;
                    }
                }
                if self.nodes[x].requires_grad {
                    self.accumulate(x, dx);
                }
                if self.nodes[gamma].requires_grad {
                    self.accumulate(gamma, dgamma);
                }
                if self.nodes[beta].requires_grad {
                    self.accumulate(beta, dbeta);
                }
            }
            Op::Embedding { table, ids, dim } => {
                let vocab = self.nodes[table].shape[0];
                let mut dt = vec![F::zero(); vocab * dim];
                for (r, &tok) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[tok * dim + j] = dt[tok * dim + j] + g[r * dim + j];
                    }
                }
                self.accumulate(table, dt);
            }
            Op::ConcatCols { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![F::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accumulate(p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            } => {
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(x, dx);
            }
            Op::RowEntropySum { x, .. } => {
                let gs = g[0];
                let dx: Vec<F> = self.nodes[x]
                    .data
                    .iter()
                    .map(|&p| {
                        if p > F::zero() {
                            -gs * (p.ln() + F::one())
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.accumulate(x, dx);
            }
        }
    }
}
