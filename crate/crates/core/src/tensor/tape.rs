// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over a flat tape of nodes.
//!
//! Every operation evaluates eagerly and appends a node. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! depends on a leaf with `requires_grad` set.

use std::ops::Range;

use super::kernels::{self, check_targets, gemm, softmax_row, MASK_SENTINEL};
use super::Tensor;
use crate::error::{LabError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var, f64),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        stats: Vec<(f64, f64)>,
        eps: f64,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        rms: Vec<f64>,
        eps: f64,
    },
    Softmax(Var),
    CausalMask(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather(Var, Vec<usize>),
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Overwrite(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or is untracked.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording context for one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Adds a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Pre-affine normalized rows cached by a norm node, if `v` is one.
    pub fn normalized(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        let xhat = match &node.op {
            Op::LayerNorm { xhat, .. } | Op::RmsNorm { xhat, .. } => xhat,
            _ => return None,
        };
        Tensor::new(node.value.shape().to_vec(), xhat.clone()).ok()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(LabError::InvalidShape(format!(
                "{op} expects a matrix or vector, got {other:?}"
            ))),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> LabError {
        LabError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), k, 1, self.value(b).data(), n, 1, 0.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    /// `alpha * a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, alpha, self.value(a).data(), k, 1, self.value(b).data(), 1, k, 0.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b, alpha), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    /// Adds the length-`n` vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_row", a, bias));
        }
        let mut t = self.value(a).clone();
        let b = self.value(bias).data();
        for row in t.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let tracked = self.tracked(a) || self.tracked(bias);
        Ok(self.push(t, Op::AddRow(a, bias), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= s);
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, s), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for x in t.data_mut() {
            let u = GELU_C * (*x + 0.044715 * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        let tracked = self.tracked(a);
        self.push(t, Op::Gelu(a), tracked)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let src = self.value(x);
        let mut xhat = vec![0.0; src.len()];
        let stats: Vec<(f64, f64)> = xhat
            .chunks_mut(d)
            .enumerate()
            .map(|(r, dst)| kernels::layer_norm_row(src.row(r), eps, dst))
            .collect();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                stats,
                eps,
            },
            tracked,
        ))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d {
            return Err(self.mismatch("rms_norm", x, gain));
        }
        let src = self.value(x);
        let mut xhat = vec![0.0; src.len()];
        let rms: Vec<f64> = xhat
            .chunks_mut(d)
            .enumerate()
            .map(|(r, dst)| kernels::rms_norm_row(src.row(r), eps, dst))
            .collect();
        let g = self.value(gain).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for (o, gi) in row.iter_mut().zip(g) {
                *o *= gi;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain);
        Ok(self.push(
            t,
            Op::RmsNorm {
                x,
                gain,
                xhat,
                rms,
                eps,
            },
            tracked,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let mut out = vec![0.0; src.len()];
        for (r, dst) in out.chunks_mut(c).enumerate() {
            if !softmax_row(src.row(r), dst) {
                return Err(LabError::FullyMaskedRow { row: r });
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Softmax(x), tracked))
    }

    /// Adds the masking sentinel at `(i, j)` for `i < j < real_cols`.
    /// Columns at or past `real_cols` (bias slots) stay visible to every row.
    pub fn causal_mask(&mut self, x: Var, real_cols: usize) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        let limit = real_cols.min(c);
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            for v in row.iter_mut().take(limit).skip(i + 1) {
                *v += MASK_SENTINEL;
            }
        }
        let tracked = self.tracked(x);
        self.push(t, Op::CausalMask(x), tracked)
    }

    /// Mean NLL over rows with `mask[r] == false`; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let src = self.value(logits);
        let count = check_targets(src, targets, mask)?;
        let c = src.cols();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, dst) in probs.chunks_mut(c).enumerate() {
            if mask[r] {
                continue;
            }
            let row = src.row(r);
            total += kernels::row_nll(row, targets[r]);
            softmax_row(row, dst);
        }
        let t = Tensor::scalar(total / count as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            tracked,
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(LabError::TokenOutOfRange { token: bad, vocab: n });
        }
        if ids.is_empty() {
            return Err(LabError::InvalidArgument("gather_rows with no ids".into()));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let tracked = self.tracked(table);
        Ok(self.push(t, Op::Gather(table, ids.to_vec()), tracked))
    }

    /// Sub-block `rows x cols` of a matrix.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims(x, "slice")?;
        if rows.is_empty() || cols.is_empty() || rows.end > r || cols.end > c {
            return Err(LabError::InvalidArgument(format!(
                "slice {rows:?} x {cols:?} out of bounds for [{r} x {c}]"
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src.data()[i * c + cols.start..i * c + cols.end]);
        }
        let t = Tensor::matrix(rows.len(), cols.len(), out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Slice { x, rows, cols }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LabError::InvalidArgument("concat of nothing".into()))?;
        let (r, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_cols")?;
            if pr != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(r, total, out)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LabError::InvalidArgument("concat of nothing".into()))?;
        let (_, c) = self.dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_rows")?;
            if pc != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let t = Tensor::matrix(rows, c, out)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Copy of `x` with `(row, col) -> value` entries written over. Overwritten
    /// entries pass no gradient back to `x`.
    pub fn overwrite(&mut self, x: Var, entries: &[(usize, usize, f64)]) -> Result<Var> {
        let mut t = self.value(x).clone();
        let (r, c) = (t.rows(), t.cols());
        let mut flat = Vec::with_capacity(entries.len());
        for &(i, j, v) in entries {
            if i >= r || j >= c {
                return Err(LabError::InvalidArgument(format!(
                    "overwrite target ({i}, {j}) outside [{r} x {c}]"
                )));
            }
            t.data_mut()[i * c + j] = v;
            flat.push(i * c + j);
        }
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Overwrite(x, flat), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LabError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // leaves keep their gradients; interior buffers are dropped
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a, "").expect("recorded shape");
                let n = self.value(b).cols();
                if let Some(ga) = self.acc(grads, a) {
                    // ga += g * b^T
                    gemm(m, n, k, 1.0, g, n, 1, self.value(b).data(), 1, n, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // gb += a^T * g
                    gemm(k, m, n, 1.0, self.value(a).data(), 1, k, g, n, 1, 1.0, gb);
                }
            }
            &Op::MatMulNt(a, b, alpha) => {
                let (m, k) = self.dims(a, "").expect("recorded shape");
                let n = self.value(b).rows();
                if let Some(ga) = self.acc(grads, a) {
                    // ga += alpha * g * b
                    gemm(m, n, k, alpha, g, n, 1, self.value(b).data(), k, 1, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // gb += alpha * g^T * a
                    gemm(n, m, k, alpha, g, 1, n, self.value(a).data(), k, 1, 1.0, gb);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let n = self.value(a).cols();
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    let bv = self.value(b).data();
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    let av = self.value(a).data();
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((acc, gy), &x) in ga.iter_mut().zip(g).zip(self.value(a).data()) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        *acc += gy * dy;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                stats,
                eps,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, gy), h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *acc += gy * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(acc, gy)| *acc += gy);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let xs = self.value(*x).data();
                    let df = d as f64;
                    let mut gh = vec![0.0; d];
                    for (r, &(mean, std)) in stats.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xs[r * d..(r + 1) * d];
                        for ((h, gy), gi) in gh.iter_mut().zip(grow).zip(gv) {
                            *h = gy * gi;
                        }
                        let s = std + eps;
                        let mean_gh = gh.iter().sum::<f64>() / df;
                        // d std / d x_j = (x_j - mean) / (d * std); zero when std == 0
                        let coupling = if std > 0.0 {
                            let dot: f64 =
                                gh.iter().zip(xrow).map(|(h, xv)| h * (xv - mean)).sum();
                            dot / (df * std * s * s)
                        } else {
                            0.0
                        };
                        let out = &mut gx[r * d..(r + 1) * d];
                        for ((o, h), xv) in out.iter_mut().zip(&gh).zip(xrow) {
                            *o += (h - mean_gh) / s - (xv - mean) * coupling;
                        }
                    }
                }
            }
            Op::RmsNorm {
                x,
                gain,
                xhat,
                rms,
                eps,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, gy), h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *acc += gy * h;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let xs = self.value(*x).data();
                    let df = d as f64;
                    let mut gh = vec![0.0; d];
                    for (r, &rv) in rms.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xs[r * d..(r + 1) * d];
                        for ((h, gy), gi) in gh.iter_mut().zip(grow).zip(gv) {
                            *h = gy * gi;
                        }
                        let s = rv + eps;
                        let coupling = if rv > 0.0 {
                            let dot: f64 = gh.iter().zip(xrow).map(|(h, xv)| h * xv).sum();
                            dot / (df * rv * s * s)
                        } else {
                            0.0
                        };
                        let out = &mut gx[r * d..(r + 1) * d];
                        for ((o, h), xv) in out.iter_mut().zip(&gh).zip(xrow) {
                            *o += h / s - xv * coupling;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    let p = node.value.data();
                    let c = node.value.cols();
                    for ((o, prow), grow) in gx.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((acc, pi), gi) in o.iter_mut().zip(prow).zip(grow) {
                            *acc += pi * (gi - dot);
                        }
                    }
                }
            }
            &Op::CausalMask(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / *count as f64;
                    for (r, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            continue;
                        }
                        let row = &mut gl[r * c..(r + 1) * c];
                        for (acc, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *acc += scale * p;
                        }
                        row[y] -= scale;
                    }
                }
            }
            Op::Gather(table, ids) => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = self.value(*table).cols();
                    for (grow, &i) in g.chunks(d).zip(ids) {
                        for (acc, gy) in gt[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *acc += gy;
                        }
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let c = self.value(*x).cols();
                    let w = cols.len();
                    for (k, i) in rows.clone().enumerate() {
                        let dst = &mut gx[i * c + cols.start..i * c + cols.end];
                        for (acc, gy) in dst.iter_mut().zip(&g[k * w..(k + 1) * w]) {
                            *acc += gy;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for (i, dst) in gp.chunks_mut(w).enumerate() {
                            let src = &g[i * total + offset..i * total + offset + w];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::Overwrite(x, flat) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut pass = g.to_vec();
                    for &k in flat {
                        pass[k] = 0.0;
                    }
                    gx.iter_mut().zip(&pass).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}
