//! Define-by-run computation tape.
//!
//! Forward ops record themselves in creation order; `backward` replays the
//! records in reverse, accumulating vector-Jacobian products additively.
//! Single-threaded per tape; a consumed tape rejects further use.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape. Using it on any other tape is a
/// usage error, not undefined behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId {
    tape: u64,
    idx: usize,
}

/// Loss reduction for the masked cross-entropy op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op<S> {
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out = A (m×k) @ B (n×k)ᵀ
    MatmulTransposeB {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    MulElem {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: S,
    },
    /// A (m×n) + row (n), broadcast over rows.
    AddRowBroadcast {
        a: usize,
        row: usize,
        m: usize,
        n: usize,
    },
    /// A (m×n) ⊙ col (m), each row i scaled by col[i].
    MulColBroadcast {
        a: usize,
        col: usize,
        m: usize,
        n: usize,
    },
    SoftmaxLastDim {
        a: usize,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        rows: usize,
        cols: usize,
        means: Vec<S>,
        inv_stds: Vec<S>,
    },
    Gelu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
        width: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
        rows: usize,
        widths: Vec<usize>,
    },
    SliceCols {
        a: usize,
        rows: usize,
        total: usize,
        start: usize,
        width: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
        cols: usize,
        row_counts: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    CrossEntropyMasked {
        logits: usize,
        targets: Vec<u32>,
        active: Vec<bool>,
        vocab: usize,
        smoothing: S,
        reduction: Reduction,
        active_count: usize,
        probs: Vec<S>,
    },
    Dropout {
        a: usize,
        mask: Vec<S>,
    },
}

struct OpRecord<S> {
    out: usize,
    op: Op<S>,
}

/// Reverse-mode tape. Records ops during the forward pass, replays them in
/// reverse on `backward`, then refuses further recording.
pub struct Tape<S: Scalar> {
    tag: u64,
    nodes: Vec<Node<S>>,
    ops: Vec<OpRecord<S>>,
    grads: Vec<Option<Vec<S>>>,
    diagnostics: Vec<String>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            tag: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            diagnostics: Vec::new(),
            consumed: false,
        }
    }

    /// Register a trainable input. Data is snapshotted; gradients are read
    /// back with [`Tape::write_grad_into`] after `backward`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Register a non-trainable input (masks, fixed vectors).
    pub fn constant(&mut self, t: &Tensor<S>) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "constant_from",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, false))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool) -> TensorId {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
        });
        self.grads.push(None);
        TensorId {
            tape: self.tag,
            idx,
        }
    }

    fn check(&self, id: TensorId) -> Result<usize> {
        if id.tape != self.tag {
            return Err(Error::Usage("tensor id belongs to a different tape".into()));
        }
        Ok(id.idx)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        Ok(())
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.idx].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.idx].shape
    }

    /// Gradient accumulated for a node, if any flowed to it.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.idx].as_deref()
    }

    /// Accumulate this node's gradient into the tensor it was created from.
    pub fn write_grad_into(&self, id: TensorId, target: &mut Tensor<S>) {
        if let Some(g) = self.grads[id.idx].as_deref() {
            target.accumulate_grad(g);
        }
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        needs_grad: bool,
        op_of: impl FnOnce(usize) -> Op<S>,
    ) -> TensorId {
        let id = self.push(shape, data, needs_grad);
        self.ops.push(OpRecord {
            out: id.idx,
            op: op_of(id.idx),
        });
        id
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[i].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.nodes[i].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ai, "matmul")?;
        let (k2, n) = self.dims2(bi, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[ai].shape.clone(),
                rhs: self.nodes[bi].shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(
            &self.nodes[ai].data,
            &self.nodes[bi].data,
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.record(vec![m, n], out, ng, |_| Op::Matmul {
            a: ai,
            b: bi,
            m,
            k,
            n,
        }))
    }

    /// out = A (m×k) @ B (n×k)ᵀ. Used for attention scores and the tied LM head.
    pub fn matmul_transpose_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ai, "matmul_transpose_b")?;
        let (n, k2) = self.dims2(bi, "matmul_transpose_b")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_transpose_b",
                lhs: self.nodes[ai].shape.clone(),
                rhs: self.nodes[bi].shape.clone(),
            });
        }
        let av = &self.nodes[ai].data;
        let bv = &self.nodes[bi].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = S::zero();
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.record(vec![m, n], out, ng, |_| Op::MatmulTransposeB {
            a: ai,
            b: bi,
            m,
            k,
            n,
        }))
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op_of: impl FnOnce(usize, usize) -> Op<S>,
    ) -> Result<TensorId> {
        self.check_live()?;
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::Shape {
                op: name,
                lhs: self.nodes[ai].shape.clone(),
                rhs: self.nodes[bi].shape.clone(),
            });
        }
        let out: Vec<S> = self.nodes[ai]
            .data
            .iter()
            .zip(&self.nodes[bi].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.record(shape, out, ng, |_| op_of(ai, bi)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |ai, bi| Op::Add { a: ai, b: bi })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |ai, bi| Op::Sub { a: ai, b: bi })
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(
            a,
            b,
            "mul_elem",
            |x, y| x * y,
            |ai, bi| Op::MulElem { a: ai, b: bi },
        )
    }

    pub fn scale(&mut self, a: TensorId, factor: S) -> Result<TensorId> {
        self.check_live()?;
        let ai = self.check(a)?;
        let out: Vec<S> = self.nodes[ai].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[ai].shape.clone();
        let ng = self.nodes[ai].needs_grad;
        Ok(self.record(shape, out, ng, |_| Op::Scale { a: ai, factor }))
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let (ai, ri) = (self.check(a)?, self.check(row)?);
        let (m, n) = self.dims2(ai, "add_row_broadcast")?;
        if self.nodes[ri].data.len() != n {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: self.nodes[ai].shape.clone(),
                rhs: self.nodes[ri].shape.clone(),
            });
        }
        let rowv = &self.nodes[ri].data;
        let mut out = self.nodes[ai].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += rowv[j];
            }
        }
        let ng = self.nodes[ai].needs_grad || self.nodes[ri].needs_grad;
        Ok(self.record(vec![m, n], out, ng, |_| Op::AddRowBroadcast {
            a: ai,
            row: ri,
            m,
            n,
        }))
    }

    pub fn mul_col_broadcast(&mut self, a: TensorId, col: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let (ai, ci) = (self.check(a)?, self.check(col)?);
        let (m, n) = self.dims2(ai, "mul_col_broadcast")?;
        if self.nodes[ci].data.len() != m {
            return Err(Error::Shape {
                op: "mul_col_broadcast",
                lhs: self.nodes[ai].shape.clone(),
                rhs: self.nodes[ci].shape.clone(),
            });
        }
        let colv = &self.nodes[ci].data;
        let mut out = self.nodes[ai].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= colv[i];
            }
        }
        let ng = self.nodes[ai].needs_grad || self.nodes[ci].needs_grad;
        Ok(self.record(vec![m, n], out, ng, |_| Op::MulColBroadcast {
            a: ai,
            col: ci,
            m,
            n,
        }))
    }

    /// Row-wise softmax over the last dimension. Entries may be −∞; a row
    /// that is entirely −∞ yields a uniform row and records a diagnostic
    /// (mask invariants should make that impossible).
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let ai = self.check(a)?;
        let shape = self.nodes[ai].shape.clone();
        let cols = *shape.last().ok_or(Error::Shape {
            op: "softmax_lastdim",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let rows = self.nodes[ai].data.len() / cols;
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let x = &self.nodes[ai].data[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
            if max == S::neg_infinity() {
                let u = S::one() / S::from_f64(cols as f64);
                out[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .for_each(|v| *v = u);
                self.diagnostics
                    .push(format!("softmax: row {r} entirely -inf; emitted uniform"));
                continue;
            }
            let mut sum = S::zero();
            for c in 0..cols {
                let e = (x[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / sum;
            }
        }
        let ng = self.nodes[ai].needs_grad;
        Ok(self.record(shape, out, ng, |_| Op::SoftmaxLastDim { a: ai, rows, cols }))
    }

    /// Per-row normalization over the last dimension followed by the
    /// elementwise affine `gain ⊙ x̂ + bias`. Biased variance, stabilized by
    /// `eps` (zero-variance rows normalize to zero).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    ) -> Result<TensorId> {
        self.check_live()?;
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (rows, cols) = self.dims2(xi, "layer_norm")?;
        if self.nodes[gi].data.len() != cols || self.nodes[bi].data.len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.nodes[xi].shape.clone(),
                rhs: self.nodes[gi].shape.clone(),
            });
        }
        let inv_n = S::one() / S::from_f64(cols as f64);
        let mut out = vec![S::zero(); rows * cols];
        let mut means = vec![S::zero(); rows];
        let mut inv_stds = vec![S::zero(); rows];
        for r in 0..rows {
            let xr = &self.nodes[xi].data[r * cols..(r + 1) * cols];
            let mut mean = S::zero();
            for &v in xr {
                mean += v;
            }
            mean *= inv_n;
            let mut var = S::zero();
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = S::one() / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for c in 0..cols {
                let xhat = (xr[c] - mean) * inv_std;
                out[r * cols + c] = self.nodes[gi].data[c] * xhat + self.nodes[bi].data[c];
            }
        }
        let ng =
            self.nodes[xi].needs_grad || self.nodes[gi].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.record(vec![rows, cols], out, ng, |_| Op::LayerNorm {
            x: xi,
            gain: gi,
            bias: bi,
            rows,
            cols,
            means,
            inv_stds,
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let xi = self.check(x)?;
        let out: Vec<S> = self.nodes[xi].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.nodes[xi].needs_grad;
        Ok(self.record(shape, out, ng, |_| Op::Gelu { x: xi }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let xi = self.check(x)?;
        let one = S::one();
        let out: Vec<S> = self.nodes[xi]
            .data
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let shape = self.nodes[xi].shape.clone();
        let ng = self.nodes[xi].needs_grad;
        Ok(self.record(shape, out, ng, |_| Op::Sigmoid { x: xi }))
    }

    /// Row lookup `out[t] = table[indices[t]]` with scatter-add backward.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        self.check_live()?;
        let ti = self.check(table)?;
        let (rows, width) = self.dims2(ti, "gather_rows")?;
        for (pos, &ix) in indices.iter().enumerate() {
            if ix >= rows {
                return Err(Error::Vocab(format!(
                    "index {ix} out of range (table has {rows} rows) at position {pos}"
                )));
            }
        }
        let mut out = vec![S::zero(); indices.len() * width];
        for (t, &ix) in indices.iter().enumerate() {
            out[t * width..(t + 1) * width]
                .copy_from_slice(&self.nodes[ti].data[ix * width..(ix + 1) * width]);
        }
        let ng = self.nodes[ti].needs_grad;
        let idx = indices.to_vec();
        Ok(
            self.record(vec![indices.len(), width], out, ng, |_| Op::GatherRows {
                table: ti,
                indices: idx,
                width,
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols with no parts".into()));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        for &p in parts {
            idxs.push(self.check(p)?);
        }
        let (rows, _) = self.dims2(idxs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let (r, w) = self.dims2(i, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[idxs[0]].shape.clone(),
                    rhs: self.nodes[i].shape.clone(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); rows * total];
        let mut offset = 0;
        for (&i, &w) in idxs.iter().zip(&widths) {
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&self.nodes[i].data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = idxs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.record(vec![rows, total], out, ng, |_| Op::ConcatCols {
            parts: idxs,
            rows,
            widths,
        }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, width: usize) -> Result<TensorId> {
        self.check_live()?;
        let ai = self.check(a)?;
        let (rows, total) = self.dims2(ai, "slice_cols")?;
        if start + width > total {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.nodes[ai].shape.clone(),
                rhs: vec![start, width],
            });
        }
        let mut out = vec![S::zero(); rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width].copy_from_slice(
                &self.nodes[ai].data[r * total + start..r * total + start + width],
            );
        }
        let ng = self.nodes[ai].needs_grad;
        Ok(self.record(vec![rows, width], out, ng, |_| Op::SliceCols {
            a: ai,
            rows,
            total,
            start,
            width,
        }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows with no parts".into()));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        for &p in parts {
            idxs.push(self.check(p)?);
        }
        let (_, cols) = self.dims2(idxs[0], "concat_rows")?;
        let mut row_counts = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let (r, c) = self.dims2(i, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[idxs[0]].shape.clone(),
                    rhs: self.nodes[i].shape.clone(),
                });
            }
            row_counts.push(r);
        }
        let total: usize = row_counts.iter().sum();
        let mut out = Vec::with_capacity(total * cols);
        for &i in &idxs {
            out.extend_from_slice(&self.nodes[i].data);
        }
        let ng = idxs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.record(vec![total, cols], out, ng, |_| Op::ConcatRows {
            parts: idxs,
            cols,
            row_counts,
        }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_live()?;
        let ai = self.check(a)?;
        let mut acc = S::zero();
        for &v in &self.nodes[ai].data {
            acc += v;
        }
        let ng = self.nodes[ai].needs_grad;
        Ok(self.record(vec![1], vec![acc], ng, |_| Op::SumAll { a: ai }))
    }

    /// Negative log-likelihood over the active positions of a `[n, V]` logit
    /// matrix. Inactive positions contribute nothing, including to gradients.
    pub fn cross_entropy_masked(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        active: &[bool],
        smoothing: S,
        reduction: Reduction,
    ) -> Result<TensorId> {
        self.check_live()?;
        let li = self.check(logits)?;
        let (n, vocab) = self.dims2(li, "cross_entropy_masked")?;
        if targets.len() != n || active.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_masked",
                lhs: vec![n, vocab],
                rhs: vec![targets.len(), active.len()],
            });
        }
        let active_count = active.iter().filter(|&&a| a).count();
        if active_count == 0 {
            return Err(Error::Data("no masked positions in batch".into()));
        }
        for t in 0..n {
            if active[t] && targets[t] as usize >= vocab {
                return Err(Error::Vocab(format!(
                    "target id {} out of range (vocab {vocab}) at position {t}",
                    targets[t]
                )));
            }
        }
        let eps = smoothing;
        let one = S::one();
        let inv_v = one / S::from_f64(vocab as f64);
        let mut probs = vec![S::zero(); n * vocab];
        let mut total = S::zero();
        for t in 0..n {
            if !active[t] {
                continue;
            }
            let row = &self.nodes[li].data[t * vocab..(t + 1) * vocab];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[t * vocab + c] = e;
                sum += e;
            }
            for c in 0..vocab {
                probs[t * vocab + c] = probs[t * vocab + c] / sum;
            }
            let lse = max + sum.ln();
            let mut row_sum = S::zero();
            for &v in row {
                row_sum += v;
            }
            // (1−ε)·NLL(target) + ε·mean_v NLL(v)
            total += lse - (one - eps) * row[targets[t] as usize] - eps * inv_v * row_sum;
        }
        let value = match reduction {
            Reduction::Mean => total / S::from_f64(active_count as f64),
            Reduction::Sum => total,
        };
        let ng = self.nodes[li].needs_grad;
        let targets = targets.to_vec();
        let active = active.to_vec();
        Ok(
            self.record(vec![1], vec![value], ng, |_| Op::CrossEntropyMasked {
                logits: li,
                targets,
                active,
                vocab,
                smoothing: eps,
                reduction,
                active_count,
                probs,
            }),
        )
    }

    /// Inverted dropout with keep-probability `1 − p`; identity when `p = 0`.
    /// The caller decides training vs evaluation by not recording this op.
    pub fn dropout(&mut self, a: TensorId, p: f64, rng: &mut crate::rng::Rng) -> Result<TensorId> {
        self.check_live()?;
        let ai = self.check(a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.nodes[ai].data.len())
            .map(|_| if rng.bernoulli(p) { S::zero() } else { keep })
            .collect();
        let out: Vec<S> = self.nodes[ai]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let ng = self.nodes[ai].needs_grad;
        Ok(self.record(shape, out, ng, |_| Op::Dropout { a: ai, mask }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Replay the tape in reverse, accumulating gradients for every node
    /// reachable from `loss` that needs one. Consumes the tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(Error::Usage("backward called on a consumed tape".into()));
        }
        if self.nodes[li].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        self.consumed = true;
        self.grads[li] = Some(vec![S::one()]);

        let Tape {
            nodes, ops, grads, ..
        } = self;
        for rec in ops.iter().rev() {
            if !nodes[rec.out].needs_grad {
                continue;
            }
            let d_out = match grads[rec.out].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            backward_op(&rec.op, &d_out, nodes, grads);
        }
        // Release recorded ops; values stay readable.
        self.ops.clear();
        Ok(())
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

const GELU_COEF: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_CUBIC: f64 = 0.044715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_COEF);
    let a = S::from_f64(GELU_CUBIC);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_COEF);
    let a = S::from_f64(GELU_CUBIC);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], idx: usize, delta: &[S]) {
    if !nodes[idx].needs_grad {
        return;
    }
    match grads[idx].as_mut() {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
        None => grads[idx] = Some(delta.to_vec()),
    }
}

fn backward_op<S: Scalar>(
    op: &Op<S>,
    d_out: &[S],
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    match op {
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].needs_grad {
                // dA[i,p] = Σ_j dOut[i,j]·B[p,j]
                let bv = &nodes[*b].data;
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d == S::zero() {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += d * bv[p * n + j];
                        }
                    }
                }
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*b].needs_grad {
                // dB[p,j] = Σ_i A[i,p]·dOut[i,j]
                let av = &nodes[*a].data;
                let mut db = vec![S::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == S::zero() {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += x * d_out[i * n + j];
                        }
                    }
                }
                accumulate(grads, nodes, *b, &db);
            }
        }
        Op::MatmulTransposeB { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].needs_grad {
                // dA[i,p] = Σ_j dOut[i,j]·B[j,p]
                let bv = &nodes[*b].data;
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d == S::zero() {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += d * bv[j * k + p];
                        }
                    }
                }
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*b].needs_grad {
                // dB[j,p] = Σ_i dOut[i,j]·A[i,p]
                let av = &nodes[*a].data;
                let mut db = vec![S::zero(); n * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d == S::zero() {
                            continue;
                        }
                        for p in 0..k {
                            db[j * k + p] += d * av[i * k + p];
                        }
                    }
                }
                accumulate(grads, nodes, *b, &db);
            }
        }
        Op::Add { a, b } => {
            accumulate(grads, nodes, *a, d_out);
            accumulate(grads, nodes, *b, d_out);
        }
        Op::Sub { a, b } => {
            accumulate(grads, nodes, *a, d_out);
            if nodes[*b].needs_grad {
                let neg: Vec<S> = d_out.iter().map(|&d| -d).collect();
                accumulate(grads, nodes, *b, &neg);
            }
        }
        Op::MulElem { a, b } => {
            if nodes[*a].needs_grad {
                let da: Vec<S> = d_out
                    .iter()
                    .zip(&nodes[*b].data)
                    .map(|(&d, &y)| d * y)
                    .collect();
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*b].needs_grad {
                let db: Vec<S> = d_out
                    .iter()
                    .zip(&nodes[*a].data)
                    .map(|(&d, &x)| d * x)
                    .collect();
                accumulate(grads, nodes, *b, &db);
            }
        }
        Op::Scale { a, factor } => {
            if nodes[*a].needs_grad {
                let da: Vec<S> = d_out.iter().map(|&d| d * *factor).collect();
                accumulate(grads, nodes, *a, &da);
            }
        }
        Op::AddRowBroadcast { a, row, m, n } => {
            accumulate(grads, nodes, *a, d_out);
            if nodes[*row].needs_grad {
                let mut dr = vec![S::zero(); *n];
                for i in 0..*m {
                    for j in 0..*n {
                        dr[j] += d_out[i * n + j];
                    }
                }
                accumulate(grads, nodes, *row, &dr);
            }
        }
        Op::MulColBroadcast { a, col, m, n } => {
            if nodes[*a].needs_grad {
                let colv = &nodes[*col].data;
                let mut da = vec![S::zero(); m * n];
                for i in 0..*m {
                    for j in 0..*n {
                        da[i * n + j] = d_out[i * n + j] * colv[i];
                    }
                }
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*col].needs_grad {
                let av = &nodes[*a].data;
                let mut dc = vec![S::zero(); *m];
                for i in 0..*m {
                    for j in 0..*n {
                        dc[i] += d_out[i * n + j] * av[i * n + j];
                    }
                }
                accumulate(grads, nodes, *col, &dc);
            }
        }
        Op::SoftmaxLastDim { a, rows, cols } => {
            if nodes[*a].needs_grad {
                // Uses only the outputs; −∞ inputs end up with exact zero grad.
                // The uniform all-−∞ fallback row is treated as constant.
                let p_all = softmax_output(nodes, *a, *rows, *cols);
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..*rows {
                    let p = &p_all[r * cols..(r + 1) * cols];
                    let dy = &d_out[r * cols..(r + 1) * cols];
                    let mut dot = S::zero();
                    for c in 0..*cols {
                        dot += dy[c] * p[c];
                    }
                    let x = &nodes[*a].data[r * cols..(r + 1) * cols];
                    let all_blocked = x.iter().all(|&v| v == S::neg_infinity());
                    if all_blocked {
                        continue;
                    }
                    for c in 0..*cols {
                        dx[r * cols + c] = p[c] * (dy[c] - dot);
                    }
                }
                accumulate(grads, nodes, *a, &dx);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            rows,
            cols,
            means,
            inv_stds,
        } => {
            let inv_n = S::one() / S::from_f64(*cols as f64);
            let gv = &nodes[*gain].data;
            let mut dx = vec![S::zero(); rows * cols];
            let mut dg = vec![S::zero(); *cols];
            let mut db = vec![S::zero(); *cols];
            for r in 0..*rows {
                let xr = &nodes[*x].data[r * cols..(r + 1) * cols];
                let dy = &d_out[r * cols..(r + 1) * cols];
                let mean = means[r];
                let inv_std = inv_stds[r];
                let mut mean_gdy = S::zero();
                let mut mean_gdy_xhat = S::zero();
                for c in 0..*cols {
                    let xhat = (xr[c] - mean) * inv_std;
                    let gdy = gv[c] * dy[c];
                    mean_gdy += gdy;
                    mean_gdy_xhat += gdy * xhat;
                    dg[c] += dy[c] * xhat;
                    db[c] += dy[c];
                }
                mean_gdy *= inv_n;
                mean_gdy_xhat *= inv_n;
                for c in 0..*cols {
                    let xhat = (xr[c] - mean) * inv_std;
                    dx[r * cols + c] = inv_std * (gv[c] * dy[c] - mean_gdy - xhat * mean_gdy_xhat);
                }
            }
            accumulate(grads, nodes, *x, &dx);
            accumulate(grads, nodes, *gain, &dg);
            accumulate(grads, nodes, *bias, &db);
        }
        Op::Gelu { x } => {
            if nodes[*x].needs_grad {
                let dx: Vec<S> = d_out
                    .iter()
                    .zip(&nodes[*x].data)
                    .map(|(&d, &v)| d * gelu_bwd(v))
                    .collect();
                accumulate(grads, nodes, *x, &dx);
            }
        }
        Op::Sigmoid { x } => {
            if nodes[*x].needs_grad {
                let one = S::one();
                let dx: Vec<S> = d_out
                    .iter()
                    .zip(&nodes[*x].data)
                    .map(|(&d, &v)| {
                        let y = one / (one + (-v).exp());
                        d * y * (one - y)
                    })
                    .collect();
                accumulate(grads, nodes, *x, &dx);
            }
        }
        Op::GatherRows {
            table,
            indices,
            width,
        } => {
            if nodes[*table].needs_grad {
                let mut dt = vec![S::zero(); nodes[*table].data.len()];
                for (t, &ix) in indices.iter().enumerate() {
                    for c in 0..*width {
                        dt[ix * width + c] += d_out[t * width + c];
                    }
                }
                accumulate(grads, nodes, *table, &dt);
            }
        }
        Op::ConcatCols {
            parts,
            rows,
            widths,
        } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if nodes[p].needs_grad {
                    let mut dp = vec![S::zero(); rows * w];
                    for r in 0..*rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&d_out[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, nodes, p, &dp);
                }
                offset += w;
            }
        }
        Op::SliceCols {
            a,
            rows,
            total,
            start,
            width,
        } => {
            if nodes[*a].needs_grad {
                let mut da = vec![S::zero(); rows * total];
                for r in 0..*rows {
                    da[r * total + start..r * total + start + width]
                        .copy_from_slice(&d_out[r * width..(r + 1) * width]);
                }
                accumulate(grads, nodes, *a, &da);
            }
        }
        Op::ConcatRows {
            parts,
            cols,
            row_counts,
        } => {
            let mut offset = 0;
            for (&p, &rc) in parts.iter().zip(row_counts) {
                if nodes[p].needs_grad {
                    accumulate(grads, nodes, p, &d_out[offset * cols..(offset + rc) * cols]);
                }
                offset += rc;
            }
        }
        Op::SumAll { a } => {
            if nodes[*a].needs_grad {
                let da = vec![d_out[0]; nodes[*a].data.len()];
                accumulate(grads, nodes, *a, &da);
            }
        }
        Op::CrossEntropyMasked {
            logits,
            targets,
            active,
            vocab,
            smoothing,
            reduction,
            active_count,
            probs,
        } => {
            if nodes[*logits].needs_grad {
                let one = S::one();
                let inv_v = one / S::from_f64(*vocab as f64);
                let scale = match reduction {
                    Reduction::Mean => d_out[0] / S::from_f64(*active_count as f64),
                    Reduction::Sum => d_out[0],
                };
                let mut dl = vec![S::zero(); nodes[*logits].data.len()];
                for t in 0..targets.len() {
                    if !active[t] {
                        continue;
                    }
                    for c in 0..*vocab {
                        let mut q = *smoothing * inv_v;
                        if c == targets[t] as usize {
                            q += one - *smoothing;
                        }
                        dl[t * vocab + c] = scale * (probs[t * vocab + c] - q);
                    }
                }
                accumulate(grads, nodes, *logits, &dl);
            }
        }
        Op::Dropout { a, mask } => {
            if nodes[*a].needs_grad {
                let da: Vec<S> = d_out.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                accumulate(grads, nodes, *a, &da);
            }
        }
    }
}

// Softmax backward needs the op output; recompute it from the input so the
// record stays small. Matches the forward exactly (same max-subtraction).
fn softmax_output<S: Scalar>(nodes: &[Node<S>], a: usize, rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let x = &nodes[a].data[r * cols..(r + 1) * cols];
        let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
        if max == S::neg_infinity() {
            let u = S::one() / S::from_f64(cols as f64);
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v = u);
            continue;
        }
        let mut sum = S::zero();
        for c in 0..cols {
            let e = (x[c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] = out[r * cols + c] / sum;
        }
    }
    out
}
