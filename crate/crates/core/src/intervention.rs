// SPDX-License-Identifier: MIT OR Apache-2.0

//! Overwriting chosen activations of one residual state mid-forward.
//!
//! The edit lands on trace state `layer` (0 = embedding output, `l` = output
//! of block `l`) as soon as it is produced, and every later block consumes
//! the edited state.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::instrumentation::TokenSelector;
use crate::model::{Model, StateEdit, TracedForward};
use crate::trainer::{lm_example, shifted_mean};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    Zero,
    Mean,
    Value,
}

/// One activation to overwrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub token: TokenSelector,
    pub feature: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

/// Which activations to overwrite, where, and with what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub layer: usize,
    pub mode: InterventionMode,
    pub targets: Vec<Target>,
}

impl InterventionSpec {
    pub fn empty(layer: usize) -> Self {
        Self {
            layer,
            mode: InterventionMode::Zero,
            targets: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let l = model.config.n_layers;
        if self.layer > l {
            return Err(LabError::InvalidArgument(format!(
                "intervention layer {} outside states 0..={l}",
                self.layer
            )));
        }
        let d = model.config.d_model;
        if let Some(t) = self.targets.iter().find(|t| t.feature >= d) {
            return Err(LabError::InvalidArgument(format!(
                "target feature {} outside width {d}",
                t.feature
            )));
        }
        if self.mode == InterventionMode::Value && self.targets.iter().any(|t| t.value.is_none()) {
            return Err(LabError::InvalidArgument("mode `value` needs a value on every target".into()));
        }
        Ok(())
    }

    fn needs_activations(&self) -> bool {
        self.targets.iter().any(|t| matches!(t.token, TokenSelector::Rank(_)))
    }
}

/// Calibrated replacement values, one per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub means: Vec<f64>,
    pub corpus_size: usize,
    pub seed: u64,
}

/// Trace positions of each target in one sequence.
fn resolve_positions(
    spec: &InterventionSpec,
    ids: &[usize],
    state: Option<&crate::tensor::Tensor>,
    sequence: usize,
) -> Result<Vec<usize>> {
    spec.targets
        .iter()
        .map(|t| {
            let column: Option<Vec<f64>> = state.map(|s| (0..s.rows()).map(|r| s.at(r, t.feature)).collect());
            t.token.resolve(ids, column.as_deref(), sequence)
        })
        .collect()
}

/// Mean signed activation at each target over the corpus, in corpus order.
pub fn calibrate_means(
    model: &Model,
    corpus: &[Vec<usize>],
    spec: &InterventionSpec,
    seed: u64,
) -> Result<CalibrationStats> {
    spec.validate(model)?;
    if corpus.is_empty() {
        return Err(LabError::InvalidArgument("calibration corpus is empty".into()));
    }
    let mut sums = vec![0.0; spec.targets.len()];
    for (s, tokens) in corpus.iter().enumerate() {
        let out = model.forward_with_trace(tokens)?;
        let state = &out.trace.states[spec.layer];
        let pos = resolve_positions(spec, &out.trace.token_ids, Some(state), s)?;
        for ((sum, t), p) in sums.iter_mut().zip(&spec.targets).zip(pos) {
            *sum += state.at(p, t.feature);
        }
    }
    let n = corpus.len() as f64;
    Ok(CalibrationStats {
        means: sums.into_iter().map(|x| x / n).collect(),
        corpus_size: corpus.len(),
        seed,
    })
}

/// State edit realizing `spec` on one prepared sequence.
pub fn resolve_edit(
    model: &Model,
    tokens: &[usize],
    spec: &InterventionSpec,
    calib: Option<&CalibrationStats>,
    sequence: usize,
) -> Result<StateEdit> {
    spec.validate(model)?;
    let ids = model.prepare(tokens)?;
    let clean;
    let state = if spec.needs_activations() {
        clean = model.forward_with_trace(tokens)?;
        Some(&clean.trace.states[spec.layer])
    } else {
        None
    };
    let pos = resolve_positions(spec, &ids, state, sequence)?;
    let values: Vec<f64> = match spec.mode {
        InterventionMode::Zero => vec![0.0; spec.targets.len()],
        InterventionMode::Value => spec.targets.iter().map(|t| t.value.expect("validated")).collect(),
        InterventionMode::Mean => {
            let c = calib.ok_or_else(|| LabError::InvalidArgument("mode `mean` needs calibration".into()))?;
            if c.means.len() != spec.targets.len() {
                return Err(LabError::InvalidArgument(format!(
                    "calibration holds {} means for {} targets",
                    c.means.len(),
                    spec.targets.len()
                )));
            }
            c.means.clone()
        }
    };
    Ok(StateEdit {
        layer: spec.layer,
        entries: pos
            .into_iter()
            .zip(&spec.targets)
            .zip(values)
            .map(|((p, t), v)| (p, t.feature, v))
            .collect(),
    })
}

/// Forward pass with the intervention applied; the trace records the edited
/// state.
pub fn run_with_intervention(
    model: &Model,
    tokens: &[usize],
    spec: &InterventionSpec,
    calib: Option<&CalibrationStats>,
) -> Result<TracedForward> {
    let edit = resolve_edit(model, tokens, spec, calib, 0)?;
    model.forward_with_edits(tokens, &[edit])
}

/// `exp` of the mean next-token NLL over every window, each window scored
/// as inputs `w[..n-1]` and targets `w[1..]`.
///
/// Each position contributes `ln S` with `S = sum_j exp(x_j - x_target)`,
/// and the mean is taken relative to the first position's `S`, so a
/// uniform or perfect predictor yields exactly `V` or 1. Overflow gives
/// `+inf`.
pub fn perplexity(
    model: &Model,
    windows: &[Vec<usize>],
    intervention: Option<(&InterventionSpec, Option<&CalibrationStats>)>,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(LabError::InvalidArgument("perplexity needs at least one window".into()));
    }
    let mut s_values = Vec::new();
    let mut logs = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let ex = lm_example(&model.config, w)?;
        let tokens = &w[..w.len() - 1];
        let out = match intervention {
            Some((spec, calib)) => {
                let edit = resolve_edit(model, tokens, spec, calib, i)?;
                model.forward_with_edits(tokens, &[edit])?
            }
            None => model.forward_with_trace(tokens)?,
        };
        for r in (0..out.logits.rows()).filter(|&r| !ex.mask[r]) {
            let row = out.logits.row(r);
            let y = row[ex.targets[r]];
            let s: f64 = row.iter().map(|x| (x - y).exp()).sum();
            let l = if s.is_finite() {
                s.ln()
            } else {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - y
            };
            let l = if l.is_nan() { f64::INFINITY } else { l };
            s_values.push(s);
            logs.push(l);
        }
    }
    let (s0, l0) = (s_values[0], logs[0]);
    if !s0.is_finite() || !l0.is_finite() {
        return Ok(shifted_mean(&logs).exp());
    }
    let shift = logs.iter().map(|l| l - l0).sum::<f64>() / logs.len() as f64;
    Ok(s0 * shift.exp())
}

/// Same number of targets as `spec`, moved to the coordinates whose mean
/// magnitude over `corpus` at `spec.layer` lies closest to the median of
/// all such means. Original target coordinates (resolved in the first
/// sequence) are excluded. Positions are absolute indices within the
/// shortest sequence.
pub fn control_spec(model: &Model, corpus: &[Vec<usize>], spec: &InterventionSpec) -> Result<InterventionSpec> {
    spec.validate(model)?;
    let first = corpus
        .first()
        .ok_or_else(|| LabError::InvalidArgument("control selection needs a corpus".into()))?;
    let traces = corpus
        .iter()
        .map(|t| model.forward_with_trace(t).map(|o| o.trace))
        .collect::<Result<Vec<_>>>()?;
    let t_min = traces.iter().map(|t| t.seq_len()).min().expect("non-empty");
    let d = model.config.d_model;
    let mut means = vec![0.0; t_min * d];
    for tr in &traces {
        let s = &tr.states[spec.layer];
        for (i, m) in means.iter_mut().enumerate() {
            *m += s.at(i / d, i % d).abs();
        }
    }
    let n = traces.len() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    let mut sorted = means.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0
    };

    let ids = model.prepare(first)?;
    let excluded: BTreeSet<(usize, usize)> = resolve_positions(spec, &ids, Some(&traces[0].states[spec.layer]), 0)?
        .into_iter()
        .zip(&spec.targets)
        .map(|(p, t)| (p, t.feature))
        .collect();
    let mut order: Vec<usize> = (0..means.len())
        .filter(|&i| !excluded.contains(&(i / d, i % d)))
        .collect();
    order.sort_by(|&a, &b| {
        (means[a] - median)
            .abs()
            .total_cmp(&(means[b] - median).abs())
            .then(a.cmp(&b))
    });
    let targets = order
        .into_iter()
        .take(spec.targets.len())
        .map(|i| Target {
            token: TokenSelector::Index(i / d),
            feature: i % d,
            value: (spec.mode == InterventionMode::Value).then_some(0.0),
        })
        .collect();
    Ok(InterventionSpec {
        layer: spec.layer,
        mode: spec.mode,
        targets,
    })
}
