// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal self-attention with the bias formulations under study.
//!
//! Five variants share one code path ([`attend_head`]):
//!
//! * `standard`: `softmax(Q K^T / sqrt(d) + mask) V`
//! * `explicit_kv_bias`: a learnable key `k'` and value `v'` per head are
//!   appended as an extra logit column and value row. The column is the last
//!   one and is visible to every query.
//! * `off_by_one`: the explicit bias with `k' = 0`, `v' = 0`, i.e. every
//!   softmax denominator gains `exp(0)`.
//! * `extra_qk_feature`: one extra feature per position, `[Q q'] [K k']^T`,
//!   with `q'`, `k'` indexed by absolute position.
//! * `value_bias`: standard attention plus a constant `v'` on every row.
//!
//! The logit scale `1 / sqrt(d_head)` applies to every column, including the
//! bias column.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Attention formulation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[default]
    Standard,
    ExplicitKvBias,
    OffByOne,
    ExtraQkFeature,
    ValueBias,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        Self::Standard,
        Self::ExplicitKvBias,
        Self::OffByOne,
        Self::ExtraQkFeature,
        Self::ValueBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::ExplicitKvBias => "explicit_kv_bias",
            Self::OffByOne => "off_by_one",
            Self::ExtraQkFeature => "extra_qk_feature",
            Self::ValueBias => "value_bias",
        }
    }

    /// Whether the probability rows carry a trailing bias slot.
    pub fn has_bias_column(self) -> bool {
        matches!(self, Self::ExplicitKvBias | Self::OffByOne)
    }

    pub fn uses_k_bias(self) -> bool {
        self == Self::ExplicitKvBias
    }

    pub fn uses_v_bias(self) -> bool {
        matches!(self, Self::ExplicitKvBias | Self::ValueBias)
    }

    pub fn uses_position_columns(self) -> bool {
        self == Self::ExtraQkFeature
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                LabError::Config(format!(
                    "unknown attention variant `{s}` (expected one of {})",
                    Self::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

/// Variant tag plus the per-head bias parameters it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVariantParams {
    pub variant: AttentionVariant,
    /// `k'`, length `d_head`.
    pub k_bias: Option<Vec<f64>>,
    /// `v'`, length `d_head`.
    pub v_bias: Option<Vec<f64>>,
    /// `q'` of the extra-feature variant, one entry per absolute position.
    pub q_col: Option<Vec<f64>>,
    /// `k'` of the extra-feature variant, one entry per absolute position.
    pub k_col: Option<Vec<f64>>,
}

impl AttentionVariantParams {
    fn bare(variant: AttentionVariant) -> Self {
        Self {
            variant,
            k_bias: None,
            v_bias: None,
            q_col: None,
            k_col: None,
        }
    }

    pub fn standard() -> Self {
        Self::bare(AttentionVariant::Standard)
    }

    pub fn off_by_one() -> Self {
        Self::bare(AttentionVariant::OffByOne)
    }

    pub fn explicit_kv_bias(k_bias: Vec<f64>, v_bias: Vec<f64>) -> Self {
        Self {
            k_bias: Some(k_bias),
            v_bias: Some(v_bias),
            ..Self::bare(AttentionVariant::ExplicitKvBias)
        }
    }

    pub fn extra_qk_feature(q_col: Vec<f64>, k_col: Vec<f64>) -> Self {
        Self {
            q_col: Some(q_col),
            k_col: Some(k_col),
            ..Self::bare(AttentionVariant::ExtraQkFeature)
        }
    }

    pub fn value_bias(v_bias: Vec<f64>) -> Self {
        Self {
            v_bias: Some(v_bias),
            ..Self::bare(AttentionVariant::ValueBias)
        }
    }

    /// Checks presence and lengths against head size and sequence length.
    pub fn validate(&self, d_head: usize, seq_len: usize) -> Result<()> {
        let v = self.variant;
        let check = |name: &str, field: &Option<Vec<f64>>, wanted: bool, min_len: usize, exact: bool| {
            match (field, wanted) {
                (None, true) => Err(LabError::AttentionParams(format!("{v} requires `{name}`"))),
                (Some(_), false) => Err(LabError::AttentionParams(format!("{v} does not use `{name}`"))),
                (Some(x), true) if (exact && x.len() != min_len) || x.len() < min_len => {
                    Err(LabError::AttentionParams(format!(
                        "`{name}` has length {}, expected {}{min_len}",
                        x.len(),
                        if exact { "" } else { "at least " }
                    )))
                }
                _ => Ok(()),
            }
        };
        check("k_bias", &self.k_bias, v.uses_k_bias(), d_head, true)?;
        check("v_bias", &self.v_bias, v.uses_v_bias(), d_head, true)?;
        check("q_col", &self.q_col, v.uses_position_columns(), seq_len, false)?;
        check("k_col", &self.k_col, v.uses_position_columns(), seq_len, false)?;
        Ok(())
    }
}

/// Tape handles for one head's bias parameters. `k_bias`/`v_bias` are
/// `[1 x d_head]`; `q_col`/`k_col` are `[>=T x 1]` and are cut to the
/// sequence length.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadVars {
    pub k_bias: Option<Var>,
    pub v_bias: Option<Var>,
    pub q_col: Option<Var>,
    pub k_col: Option<Var>,
}

/// Nodes produced by [`attend_head`].
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[T x d_head]` attention output.
    pub out: Var,
    /// Scaled logits before masking, `[T x cols]`.
    pub logits: Var,
    /// Probabilities, `[T x cols]`.
    pub probs: Var,
}

fn missing(variant: AttentionVariant, name: &str) -> LabError {
    LabError::AttentionParams(format!("{variant} requires `{name}`"))
}

/// Records one causal attention head on `tape`.
pub fn attend_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    variant: AttentionVariant,
    vars: &HeadVars,
) -> Result<HeadOutput> {
    let (t, dh) = {
        let qv = tape.value(q);
        (qv.rows(), qv.cols())
    };
    for other in [k, v] {
        let o = tape.value(other);
        if o.rows() != t || o.cols() != dh {
            return Err(LabError::Shape {
                op: "causal_attention",
                lhs: tape.value(q).shape().to_vec(),
                rhs: o.shape().to_vec(),
            });
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();

    let scores = if variant == AttentionVariant::ExtraQkFeature {
        let qc = vars.q_col.ok_or_else(|| missing(variant, "q_col"))?;
        let kc = vars.k_col.ok_or_else(|| missing(variant, "k_col"))?;
        let qc = tape.slice(qc, 0..t, 0..1)?;
        let kc = tape.slice(kc, 0..t, 0..1)?;
        let qx = tape.concat_cols(&[q, qc])?;
        let kx = tape.concat_cols(&[k, kc])?;
        tape.matmul_nt(qx, kx, scale)?
    } else {
        tape.matmul_nt(q, k, scale)?
    };

    let (logits, values) = if variant.has_bias_column() {
        let (kb, vb) = match variant {
            AttentionVariant::OffByOne => {
                let z = tape.constant(Tensor::zeros(&[1, dh]));
                (z, z)
            }
            _ => (
                vars.k_bias.ok_or_else(|| missing(variant, "k_bias"))?,
                vars.v_bias.ok_or_else(|| missing(variant, "v_bias"))?,
            ),
        };
        let bias_logit = tape.matmul_nt(q, kb, scale)?;
        let logits = tape.concat_cols(&[scores, bias_logit])?;
        let values = tape.concat_rows(&[v, vb])?;
        (logits, values)
    } else {
        (scores, v)
    };

    let masked = tape.causal_mask(logits, t);
    let probs = tape.softmax_rows(masked)?;
    let mut out = tape.matmul(probs, values)?;
    if variant == AttentionVariant::ValueBias {
        let vb = vars.v_bias.ok_or_else(|| missing(variant, "v_bias"))?;
        out = tape.add_row(out, vb)?;
    }
    Ok(HeadOutput { out, logits, probs })
}

/// Attention probabilities (and the logits behind them) for every head of
/// one layer. Both tensors are `[heads x T x cols]`, `cols = T + 1` when the
/// variant has a bias slot. Logits at future positions are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbs {
    pub probs: Tensor,
    pub logits: Tensor,
    pub has_bias_column: bool,
}

impl AttentionProbs {
    /// Assembles per-head `[T x cols]` maps. Future-position logits are
    /// replaced by NaN.
    pub fn from_heads(probs: &[Tensor], logits: &[Tensor], has_bias_column: bool) -> Result<Self> {
        let first = probs
            .first()
            .ok_or_else(|| LabError::InvalidArgument("attention needs at least one head".into()))?;
        let (t, c) = (first.rows(), first.cols());
        if probs.len() != logits.len()
            || probs.iter().chain(logits).any(|m| m.rows() != t || m.cols() != c)
        {
            return Err(LabError::InvalidShape("inconsistent per-head attention maps".into()));
        }
        let h = probs.len();
        let p: Vec<f64> = probs.iter().flat_map(|m| m.data().iter().copied()).collect();
        let mut l: Vec<f64> = logits.iter().flat_map(|m| m.data().iter().copied()).collect();
        for head in l.chunks_mut(t * c) {
            for i in 0..t {
                for j in (i + 1)..t {
                    head[i * c + j] = f64::NAN;
                }
            }
        }
        Ok(Self {
            probs: Tensor::new(vec![h, t, c], p)?,
            logits: Tensor::new(vec![h, t, c], l)?,
            has_bias_column,
        })
    }

    pub fn heads(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Number of real tokens (query rows).
    pub fn seq_len(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn prob(&self, head: usize, query: usize, key: usize) -> f64 {
        let (t, c) = (self.seq_len(), self.cols());
        self.probs.data()[head * t * c + query * c + key]
    }

    /// `[T x cols]` probability map of one head.
    pub fn head(&self, head: usize) -> Tensor {
        let n = self.seq_len() * self.cols();
        Tensor::matrix(
            self.seq_len(),
            self.cols(),
            self.probs.data()[head * n..(head + 1) * n].to_vec(),
        )
        .expect("consistent shape")
    }

    /// Mean probability on the trailing bias slot, over heads and queries.
    pub fn bias_slot_mass(&self) -> Option<f64> {
        if !self.has_bias_column {
            return None;
        }
        let (h, t, c) = (self.heads(), self.seq_len(), self.cols());
        let total: f64 = (0..h)
            .flat_map(|hh| (0..t).map(move |i| (hh, i)))
            .map(|(hh, i)| self.prob(hh, i, c - 1))
            .sum();
        Some(total / (h * t) as f64)
    }
}

/// Runs one causal attention head on plain tensors.
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &AttentionVariantParams,
) -> Result<(Tensor, AttentionProbs)> {
    let (t, dh) = (q.rows(), q.cols());
    params.validate(dh, t)?;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let row = |tape: &mut Tape, x: &Option<Vec<f64>>| -> Result<Option<Var>> {
        x.as_ref()
            .map(|x| Ok(tape.constant(Tensor::matrix(1, x.len(), x.clone())?)))
            .transpose()
    };
    let col = |tape: &mut Tape, x: &Option<Vec<f64>>| -> Result<Option<Var>> {
        x.as_ref()
            .map(|x| Ok(tape.constant(Tensor::matrix(x.len(), 1, x.clone())?)))
            .transpose()
    };
    let vars = HeadVars {
        k_bias: row(&mut tape, &params.k_bias)?,
        v_bias: row(&mut tape, &params.v_bias)?,
        q_col: col(&mut tape, &params.q_col)?,
        k_col: col(&mut tape, &params.k_col)?,
    };
    let head = attend_head(&mut tape, qv, kv, vv, params.variant, &vars)?;
    let probs = AttentionProbs::from_heads(
        &[tape.value(head.probs).clone()],
        &[tape.value(head.logits).clone()],
        params.variant.has_bias_column(),
    )?;
    Ok((tape.value(head.out).clone(), probs))
}

/// Which reduction [`attention_probs_avg`] averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Logits,
    Probs,
}

/// Mean over heads of the logit or probability map, `[T x cols]`.
/// Future positions are 0 in probability mode and NaN in logit mode.
pub fn attention_probs_avg(attn: &AttentionProbs, reduce: MapKind) -> Tensor {
    let src = match reduce {
        MapKind::Logits => &attn.logits,
        MapKind::Probs => &attn.probs,
    };
    let (h, t, c) = (attn.heads(), attn.seq_len(), attn.cols());
    let n = t * c;
    let mut out = vec![0.0; n];
    for head in src.data().chunks(n) {
        out.iter_mut().zip(head).for_each(|(o, x)| *o += x);
    }
    let inv = h as f64;
    out.iter_mut().for_each(|o| *o /= inv);
    Tensor::matrix(t, c, out).expect("consistent shape")
}

/// Token positions on which attention concentrates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcentrationSet(BTreeSet<usize>);

impl ConcentrationSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        Self(indices.into_iter().collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

/// Attention output of query `k` split into the part contributed by the
/// concentration set (plus any bias slot or additive value bias) and the
/// part from every other visible token.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub bias_part: Vec<f64>,
    pub rest_part: Vec<f64>,
}

/// Splits row `k` of one head's attention output.
///
/// `probs` is that head's `[T x cols]` map and `values` its `[T x d_head]`
/// value states. Both parts accumulate in ascending token order; the bias
/// slot (or `value_bias` offset) is added to `bias_part` last.
pub fn decompose_output(
    probs: &Tensor,
    values: &Tensor,
    params: &AttentionVariantParams,
    c: &ConcentrationSet,
    k: usize,
) -> Result<Decomposition> {
    let t = values.rows();
    let dh = values.cols();
    if k >= t || probs.rows() != t {
        return Err(LabError::InvalidArgument(format!(
            "query {k} outside sequence of {t} tokens"
        )));
    }
    if let Some(m) = c.max().filter(|&m| m > k) {
        return Err(LabError::InvalidArgument(format!(
            "concentration index {m} lies after query {k}"
        )));
    }
    let mut bias_part = vec![0.0; dh];
    let mut rest_part = vec![0.0; dh];
    let prow = probs.row(k);
    for i in 0..=k {
        let dst = if c.contains(i) { &mut bias_part } else { &mut rest_part };
        let p = prow[i];
        dst.iter_mut().zip(values.row(i)).for_each(|(o, v)| *o += p * v);
    }
    if params.variant.has_bias_column() {
        let p = prow[t];
        let zero = vec![0.0; dh];
        let vb = params.v_bias.as_deref().unwrap_or(&zero);
        bias_part.iter_mut().zip(vb).for_each(|(o, v)| *o += p * v);
    }
    if params.variant == AttentionVariant::ValueBias {
        let vb = params
            .v_bias
            .as_deref()
            .ok_or_else(|| missing(params.variant, "v_bias"))?;
        bias_part.iter_mut().zip(vb).for_each(|(o, v)| *o += v);
    }
    Ok(Decomposition {
        bias_part,
        rest_part,
    })
}

/// Mean attention mass on the concentration set, over heads and every
/// query at or after its last member. Empty set scores 0.
pub fn concentration_score(attn: &AttentionProbs, c: &ConcentrationSet) -> Result<f64> {
    let Some(last) = c.max() else { return Ok(0.0) };
    let t = attn.seq_len();
    if last >= t {
        return Err(LabError::InvalidArgument(format!(
            "concentration index {last} outside sequence of {t} tokens"
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for h in 0..attn.heads() {
        for q in last..t {
            total += c.iter().map(|i| attn.prob(h, q, i)).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
