// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eager (non-recording) kernels. The tape reuses the row routines here so
//! both paths share their arithmetic.

use super::Tensor;
use crate::error::{LabError, Result};

/// Additive logit used for causal masking. `exp(-1e9 - max)` underflows to
/// exactly zero while gradients stay finite.
pub(crate) const MASK_SENTINEL: f64 = -1e9;

/// `c = alpha * a * b + beta * c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the debug assertions above state the index bounds every caller
    // guarantees; `c` is a dense row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn expect_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(LabError::InvalidShape(format!(
            "{op} expects a matrix, got shape {other:?}"
        ))),
    }
}

/// Matrix product `[m x k] * [k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix(a, "matmul")?;
    let (k2, n) = expect_matrix(b, "matmul")?;
    if k != k2 {
        return Err(LabError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), k, 1, b.data(), n, 1, 0.0, &mut out);
    Tensor::matrix(m, n, out)
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) -> bool {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// Row-wise softmax with max subtraction. `-inf` entries map to exactly 0.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone().with_requires_grad(false);
    out.zero_grad();
    let c = x.cols();
    for r in 0..x.rows() {
        let (src, dst) = (x.row(r), &mut out.data_mut()[r * c..(r + 1) * c]);
        if !softmax_row(src, dst) {
            return Err(LabError::FullyMaskedRow { row: r });
        }
    }
    Ok(out)
}

/// Gain, optional bias and epsilon of a normalization layer.
///
/// LayerNorm carries a bias; RMSNorm does not.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub eps: f64,
}

impl NormParams {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// Unit gain, zero bias.
    pub fn layer(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: Some(vec![0.0; d]),
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Unit gain, no bias.
    pub fn rms(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: None,
            eps: Self::DEFAULT_EPS,
        }
    }

    fn check(&self, d: usize, op: &'static str) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(LabError::InvalidArgument(format!("{op}: epsilon must be > 0")));
        }
        let bias_ok = self.bias.as_ref().map_or(true, |b| b.len() == d);
        if self.gain.len() != d || !bias_ok {
            return Err(LabError::Shape {
                op,
                lhs: vec![d],
                rhs: vec![self.gain.len()],
            });
        }
        Ok(())
    }
}

/// Normalizes one row into `xhat = (x - mean) / (std + eps)`; returns
/// `(mean, std)` with the population standard deviation.
pub(crate) fn layer_norm_row(x: &[f64], eps: f64, xhat: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let std = var.sqrt();
    let inv = 1.0 / (std + eps);
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * inv;
    }
    (mean, std)
}

/// Normalizes one row into `xhat = x / (rms + eps)`; returns the RMS.
pub(crate) fn rms_norm_row(x: &[f64], eps: f64, xhat: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / d).sqrt();
    let inv = 1.0 / (rms + eps);
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = v * inv;
    }
    rms
}

/// LayerNorm over the last dimension: `(x - mean) / (std + eps) * g + b`.
pub fn layer_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let d = x.cols();
    p.check(d, "layer_norm")?;
    let bias = p
        .bias
        .as_ref()
        .ok_or_else(|| LabError::InvalidArgument("layer_norm requires a bias vector".into()))?;
    let mut out = vec![0.0; x.len()];
    for (r, dst) in out.chunks_mut(d).enumerate() {
        layer_norm_row(x.row(r), p.eps, dst);
        for ((o, g), b) in dst.iter_mut().zip(&p.gain).zip(bias) {
            *o = *o * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// RMSNorm over the last dimension: `x / (rms(x) + eps) * g`.
pub fn rms_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    let d = x.cols();
    p.check(d, "rms_norm")?;
    if p.bias.is_some() {
        return Err(LabError::InvalidArgument("rms_norm takes no bias vector".into()));
    }
    let mut out = vec![0.0; x.len()];
    for (r, dst) in out.chunks_mut(d).enumerate() {
        rms_norm_row(x.row(r), p.eps, dst);
        for (o, g) in dst.iter_mut().zip(&p.gain) {
            *o *= g;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `logsumexp(row) - row[target]`.
pub(crate) fn row_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln() - row[target]
}

pub(crate) fn check_targets(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<usize> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t || mask.len() != t {
        return Err(LabError::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(LabError::TokenOutOfRange { token: bad, vocab: v });
    }
    let count = mask.iter().filter(|&&m| !m).count();
    if count == 0 {
        return Err(LabError::AllMasked);
    }
    Ok(count)
}

/// Mean negative log-likelihood over positions whose `mask` entry is `false`.
/// A `true` mask entry excludes that position.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let count = check_targets(logits, targets, mask)?;
    let total: f64 = (0..logits.rows())
        .filter(|&r| !mask[r])
        .map(|r| row_nll(logits.row(r), targets[r]))
        .sum();
    Ok(total / count as f64)
}
