// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detectors and statistics over residual-stream traces.
//!
//! Layers are indexed like [`HiddenStateTrace::states`]: 0 is the embedding
//! output, `l >= 1` the output of block `l`. Token indices are trace
//! positions, so the sink (when present) is position 0.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::HiddenStateTrace;
use crate::report::{fmt_num, Csv};
use crate::tensor::Tensor;

/// Thresholds for calling an activation massive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionProfile {
    pub abs_threshold: f64,
    pub ratio_threshold: f64,
}

impl Default for DetectionProfile {
    fn default() -> Self {
        Self {
            abs_threshold: 100.0,
            ratio_threshold: 1000.0,
        }
    }
}

impl DetectionProfile {
    /// Relaxed profile for desk-scale models, whose activations are smaller.
    pub fn toy() -> Self {
        Self {
            abs_threshold: 10.0,
            ratio_threshold: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.abs_threshold > 0.0 && self.ratio_threshold > 0.0 {
            Ok(())
        } else {
            Err(LabError::InvalidArgument("detection thresholds must be > 0".into()))
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "abs_threshold={} ratio_threshold={}",
            self.abs_threshold, self.ratio_threshold
        )
    }
}

/// One activation flagged by [`detect_massive`].
#[derive(Debug, Clone, PartialEq)]
pub struct MassiveActivationRecord {
    pub layer: usize,
    pub token_index: usize,
    pub feature_index: usize,
    pub value: f64,
    pub magnitude: f64,
    pub median_magnitude: f64,
    /// `magnitude / median_magnitude`, `+inf` for a zero median.
    pub ratio: f64,
    pub token_string: String,
}

impl MassiveActivationRecord {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "layer": self.layer,
            "token_index": self.token_index,
            "feature_index": self.feature_index,
            "value": self.value,
            "median": self.median_magnitude,
            "ratio": json_num(self.ratio),
            "token": self.token_string,
        })
    }
}

/// Finite numbers as JSON numbers, the rest as `"inf"`, `"-inf"`, `"nan"`.
pub fn json_num(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else if x.is_nan() {
        serde_json::json!("nan")
    } else if x > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

/// One entry of a top-k list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopEntry {
    pub token_index: usize,
    pub feature_index: usize,
    pub value: f64,
    pub magnitude: f64,
}

/// Largest magnitudes and the median magnitude of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub top: Vec<TopEntry>,
    pub median_magnitude: f64,
}

/// Median of `|x|` over every entry; the mean of the two central values
/// for an even count.
pub fn median_magnitude(state: &Tensor) -> f64 {
    let mut mags: Vec<f64> = state.data().iter().map(|x| x.abs()).collect();
    let n = mags.len();
    mags.sort_unstable_by(f64::total_cmp);
    if n % 2 == 1 {
        mags[n / 2]
    } else {
        (mags[n / 2 - 1] + mags[n / 2]) / 2.0
    }
}

/// Descending magnitude, then lower token, then lower feature.
fn by_magnitude(a: &TopEntry, b: &TopEntry) -> Ordering {
    b.magnitude
        .total_cmp(&a.magnitude)
        .then(a.token_index.cmp(&b.token_index))
        .then(a.feature_index.cmp(&b.feature_index))
}

fn entries(state: &Tensor) -> impl Iterator<Item = TopEntry> + '_ {
    let d = state.cols();
    state.data().iter().enumerate().map(move |(i, &x)| TopEntry {
        token_index: i / d,
        feature_index: i % d,
        value: x,
        magnitude: x.abs(),
    })
}

/// The `k` largest magnitudes of `state` (fewer if it has fewer entries).
pub fn top_k(state: &Tensor, k: usize) -> Vec<TopEntry> {
    let mut all: Vec<TopEntry> = entries(state).collect();
    all.sort_unstable_by(by_magnitude);
    all.truncate(k);
    all
}

/// Top-`k` profile and median magnitude of every state in the trace.
pub fn layer_stats(trace: &HiddenStateTrace, k: usize) -> Result<Vec<LayerStats>> {
    if k < 1 {
        return Err(LabError::InvalidArgument("k must be >= 1".into()));
    }
    Ok(trace
        .states
        .iter()
        .enumerate()
        .map(|(layer, s)| LayerStats {
            layer,
            top: top_k(s, k),
            median_magnitude: median_magnitude(s),
        })
        .collect())
}

/// CSV `layer,top1,...,topk,median`.
pub fn layer_profile_csv(stats: &[LayerStats], k: usize) -> Csv {
    let mut csv = Csv::new();
    let mut header = vec!["layer".to_string()];
    header.extend((1..=k).map(|i| format!("top{i}")));
    header.push("median".into());
    csv.header(&header);
    for s in stats {
        let mut row = vec![s.layer.to_string()];
        row.extend((0..k).map(|i| s.top.get(i).map_or(String::new(), |e| fmt_num(e.magnitude))));
        row.push(fmt_num(s.median_magnitude));
        csv.row(&row);
    }
    csv
}

/// Massive activations of a single `[T x d]` state.
pub fn detect_massive_in_state(
    state: &Tensor,
    layer: usize,
    token_strings: &[String],
    profile: &DetectionProfile,
) -> Result<Vec<MassiveActivationRecord>> {
    profile.validate()?;
    let median = median_magnitude(state);
    let bound = profile.ratio_threshold * median;
    let mut hits: Vec<TopEntry> = entries(state)
        .filter(|e| e.magnitude > profile.abs_threshold && e.magnitude >= bound)
        .collect();
    hits.sort_unstable_by(by_magnitude);
    Ok(hits
        .into_iter()
        .map(|e| MassiveActivationRecord {
            layer,
            token_index: e.token_index,
            feature_index: e.feature_index,
            value: e.value,
            magnitude: e.magnitude,
            median_magnitude: median,
            ratio: if median == 0.0 {
                f64::INFINITY
            } else {
                e.magnitude / median
            },
            token_string: token_strings
                .get(e.token_index)
                .cloned()
                .unwrap_or_else(|| format!("#{}", e.token_index)),
        })
        .collect())
}

/// Massive activations over every layer of the trace, sorted by
/// descending magnitude.
pub fn detect_massive(
    trace: &HiddenStateTrace,
    profile: &DetectionProfile,
) -> Result<Vec<MassiveActivationRecord>> {
    let mut all = Vec::new();
    for (layer, s) in trace.states.iter().enumerate() {
        all.extend(detect_massive_in_state(s, layer, &trace.token_strings, profile)?);
    }
    all.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then(a.layer.cmp(&b.layer))
            .then(a.token_index.cmp(&b.token_index))
            .then(a.feature_index.cmp(&b.feature_index))
    });
    Ok(all)
}

/// Thresholds of the vector-level outlier-feature definition. Every
/// comparison is strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierThresholds {
    pub magnitude: f64,
    pub layer_frac: f64,
    pub token_frac: f64,
    pub seq_frac: f64,
}

impl Default for OutlierThresholds {
    fn default() -> Self {
        Self {
            magnitude: 6.0,
            layer_frac: 0.25,
            token_frac: 0.06,
            seq_frac: 0.90,
        }
    }
}

/// Features whose large magnitudes are spread across layers, tokens and
/// sequences. Only block outputs count as layers; the embedding state is
/// ignored.
pub fn detect_outlier_features(traces: &[HiddenStateTrace], th: &OutlierThresholds) -> Result<Vec<usize>> {
    let first = traces
        .first()
        .ok_or_else(|| LabError::InvalidArgument("outlier detection needs at least one sequence".into()))?;
    let d = first.states[0].cols();
    if traces.iter().any(|t| t.states.iter().any(|s| s.cols() != d)) {
        return Err(LabError::InvalidShape("traces disagree on the model width".into()));
    }
    let mut seq_hits = vec![0usize; d];
    for trace in traces {
        let layers = trace.states.get(1..).unwrap_or_default();
        let mut layer_hits = vec![0usize; d];
        for s in layers {
            let t = s.rows();
            let mut counts = vec![0usize; d];
            for r in 0..t {
                for (c, x) in counts.iter_mut().zip(s.row(r)) {
                    if x.abs() > th.magnitude {
                        *c += 1;
                    }
                }
            }
            for (h, &c) in layer_hits.iter_mut().zip(&counts) {
                if c as f64 / t as f64 > th.token_frac {
                    *h += 1;
                }
            }
        }
        for (s, &h) in seq_hits.iter_mut().zip(&layer_hits) {
            if !layers.is_empty() && h as f64 / layers.len() as f64 > th.layer_frac {
                *s += 1;
            }
        }
    }
    let n = traces.len() as f64;
    Ok((0..d).filter(|&f| seq_hits[f] as f64 / n > th.seq_frac).collect())
}

/// Feature dimensions shared by massive activations and outlier features.
pub fn feature_overlap(records: &[MassiveActivationRecord], outliers: &[usize]) -> Vec<usize> {
    let massive: BTreeSet<usize> = records.iter().map(|r| r.feature_index).collect();
    let outliers: BTreeSet<usize> = outliers.iter().copied().collect();
    massive.intersection(&outliers).copied().collect()
}

/// How a token position is chosen in each sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelector {
    /// Absolute trace position.
    Index(usize),
    /// First position holding this token id.
    FirstId(usize),
    /// Position with the `r`-th largest `|h[t, f]|` (0-based) at the
    /// selected layer and feature.
    Rank(usize),
}

impl TokenSelector {
    /// Resolves the selector against one sequence. `column` supplies the
    /// activations for [`TokenSelector::Rank`].
    pub fn resolve(&self, token_ids: &[usize], column: Option<&[f64]>, sequence: usize) -> Result<usize> {
        let fail = |detail: String| LabError::Unresolvable { sequence, detail };
        let t = token_ids.len();
        match *self {
            Self::Index(i) if i < t => Ok(i),
            Self::Index(i) => Err(fail(format!("index {i} outside {t} positions"))),
            Self::FirstId(id) => token_ids
                .iter()
                .position(|&x| x == id)
                .ok_or_else(|| fail(format!("token id {id} does not occur"))),
            Self::Rank(r) => {
                let col = column.ok_or_else(|| fail("rank selector needs activations".into()))?;
                if r >= col.len() {
                    return Err(fail(format!("rank {r} outside {} positions", col.len())));
                }
                let mut order: Vec<usize> = (0..col.len()).collect();
                order.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
                Ok(order[r])
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Index(i) => format!("index:{i}"),
            Self::FirstId(id) => format!("first_id:{id}"),
            Self::Rank(r) => format!("rank:{r}"),
        }
    }
}

/// A (layer, token, feature) coordinate resolved per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionKey {
    pub layer: usize,
    pub token: TokenSelector,
    pub feature: usize,
}

/// Value of `key` in one trace.
pub fn position_value(trace: &HiddenStateTrace, key: &PositionKey, sequence: usize) -> Result<f64> {
    let state = trace.states.get(key.layer).ok_or_else(|| LabError::Unresolvable {
        sequence,
        detail: format!("layer {} outside {} states", key.layer, trace.states.len()),
    })?;
    if key.feature >= state.cols() {
        return Err(LabError::Unresolvable {
            sequence,
            detail: format!("feature {} outside width {}", key.feature, state.cols()),
        });
    }
    let column: Vec<f64> = (0..state.rows()).map(|r| state.at(r, key.feature)).collect();
    let t = key.token.resolve(&trace.token_ids, Some(&column), sequence)?;
    Ok(column[t])
}

/// Mean and spread of one position across a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionStats {
    pub key: PositionKey,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single sequence.
    pub std: f64,
    pub count: usize,
}

/// Signed mean and sample standard deviation of each position over the
/// traces.
pub fn position_stats(traces: &[HiddenStateTrace], positions: &[PositionKey]) -> Result<Vec<PositionStats>> {
    if traces.is_empty() {
        return Err(LabError::InvalidArgument("position statistics need at least one sequence".into()));
    }
    positions
        .iter()
        .map(|key| {
            let values = traces
                .iter()
                .enumerate()
                .map(|(s, tr)| position_value(tr, key, s))
                .collect::<Result<Vec<_>>>()?;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(PositionStats {
                key: *key,
                mean,
                std,
                count: values.len(),
            })
        })
        .collect()
}

/// CSV `layer,token,feature,mean,std,count`.
pub fn position_stats_csv(stats: &[PositionStats]) -> Csv {
    let mut csv = Csv::new();
    csv.header(&["layer", "token", "feature", "mean", "std", "count"]);
    for s in stats {
        csv.row(&[
            s.key.layer.to_string(),
            s.key.token.describe(),
            s.key.feature.to_string(),
            fmt_num(s.mean),
            fmt_num(s.std),
            s.count.to_string(),
        ]);
    }
    csv
}
