// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-side analyses: normalization trajectories, value-update
//! similarity and averaged attention maps.
//!
//! `layer` arguments here are block indices (0-based). Block `l` reads trace
//! state `l` and writes trace state `l + 1`.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::attention::{
    attention_probs_avg, concentration_score, decompose_output, ConcentrationSet, MapKind,
};
use crate::error::{LabError, Result};
use crate::instrumentation::{detect_massive_in_state, DetectionProfile, TokenSelector};
use crate::model::Model;
use crate::tensor::Tensor;

/// Pipeline stage of a [`TrajectorySnapshot`], in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    /// After centring and scaling, before the gain (and bias).
    Normalized,
    /// After the gain (and bias).
    Rescaled,
    Query,
    Key,
    Value,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Normalized => "normalized",
            Self::Rescaled => "rescaled",
            Self::Query => "query",
            Self::Key => "key",
            Self::Value => "value",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySnapshot {
    pub stage: Stage,
    /// Set for the per-head query, key and value stages.
    pub head: Option<usize>,
    pub state: Tensor,
    /// Positions holding massive activations in the block input.
    pub highlighted: Vec<usize>,
}

/// States of block `layer`'s attention input pipeline, taken from the live
/// forward pass.
pub fn norm_trajectory(
    model: &Model,
    tokens: &[usize],
    layer: usize,
    profile: &DetectionProfile,
) -> Result<Vec<TrajectorySnapshot>> {
    if layer >= model.config.n_layers {
        return Err(LabError::InvalidArgument(format!(
            "block {layer} outside a {}-block model",
            model.config.n_layers
        )));
    }
    let ids = model.prepare(tokens)?;
    let pass = model.forward(std::slice::from_ref(&ids), &[], false)?;
    let block = &pass.blocks[layer];
    let input = pass.tape.value(block.input).clone();
    let highlighted: Vec<usize> = detect_massive_in_state(&input, layer, &[], profile)?
        .into_iter()
        .map(|r| r.token_index)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let snap = |stage, head, state| TrajectorySnapshot {
        stage,
        head,
        state,
        highlighted: highlighted.clone(),
    };
    let normalized = pass
        .tape
        .normalized(block.norm1)
        .expect("norm1 is a normalization node");
    let mut out = vec![
        snap(Stage::Input, None, input.clone()),
        snap(Stage::Normalized, None, normalized),
        snap(Stage::Rescaled, None, pass.tape.value(block.norm1).clone()),
    ];
    for (stage, pick) in [
        (Stage::Query, 0usize),
        (Stage::Key, 1),
        (Stage::Value, 2),
    ] {
        for (h, nodes) in block.heads[0].iter().enumerate() {
            let v = [nodes.q, nodes.k, nodes.v][pick];
            out.push(snap(stage, Some(h), pass.tape.value(v).clone()));
        }
    }
    Ok(out)
}

/// Cosine similarity; NaN when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NAN;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Cosine matrix with an exact unit diagonal (NaN for zero vectors).
fn pairwise_cosine(vs: &[&[f64]]) -> Tensor {
    let n = vs.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = if i != j {
                cosine(vs[i], vs[j])
            } else if vs[i].iter().all(|&x| x == 0.0) {
                f64::NAN
            } else {
                1.0
            };
        }
    }
    Tensor::matrix(n, n, out).expect("n >= 1")
}

fn pairwise_l2(vs: &[&[f64]]) -> Tensor {
    let n = vs.len();
    let out = (0..n * n).map(|i| l2_distance(vs[i / n], vs[i % n])).collect();
    Tensor::matrix(n, n, out).expect("n >= 1")
}

/// Value updates of one prompt for queries past the concentration set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptUpdates {
    pub concentration: Vec<usize>,
    /// First query position (`max(C) + 1`, or 0 for an empty set).
    pub first_query: usize,
    /// `b_k`, heads concatenated, one row per query.
    pub updates: Tensor,
    /// Remaining attention output per query, heads concatenated.
    pub rest: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueUpdateSimilarity {
    pub prompts: Vec<PromptUpdates>,
    /// Per prompt, cosine between every pair of its queries.
    pub within: Vec<Tensor>,
    pub within_l2: Vec<Tensor>,
    /// Per query offset from `max(C)`, cosine between every pair of prompts.
    pub across: Vec<Tensor>,
    pub across_l2: Vec<Tensor>,
}

/// Splits every head's attention output at block `layer` into the part
/// from the concentration set `c` and the rest, then compares the
/// concentration parts across queries and prompts.
pub fn value_update_similarity(
    model: &Model,
    prompts: &[Vec<usize>],
    layer: usize,
    c: &[TokenSelector],
) -> Result<ValueUpdateSimilarity> {
    if layer >= model.config.n_layers {
        return Err(LabError::InvalidArgument(format!(
            "block {layer} outside a {}-block model",
            model.config.n_layers
        )));
    }
    if prompts.is_empty() {
        return Err(LabError::InvalidArgument("need at least one prompt".into()));
    }
    let nh = model.config.n_heads;
    let params = (0..nh)
        .map(|h| model.attention_params(layer, h))
        .collect::<Result<Vec<_>>>()?;
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for (s, tokens) in prompts.iter().enumerate() {
        let ids = model.prepare(tokens)?;
        let pass = model.forward(std::slice::from_ref(&ids), &[], false)?;
        // rank selectors have no feature to rank by here and fail to resolve
        let set = c
            .iter()
            .map(|sel| sel.resolve(&ids, None, s))
            .collect::<Result<Vec<_>>>()?;
        let set = ConcentrationSet::new(set);
        let t = ids.len();
        let first = set.max().map_or(0, |m| m + 1);
        if t < first + 2 {
            return Err(LabError::InvalidArgument(format!(
                "prompt {s} has fewer than two queries after the concentration set"
            )));
        }
        let attn = pass.attention(layer, 0);
        let dh = model.config.d_head();
        let mut updates = Vec::new();
        let mut rest = Vec::new();
        for k in first..t {
            for (h, nodes) in pass.blocks[layer].heads[0].iter().enumerate() {
                let values = pass.tape.value(nodes.v);
                let d = decompose_output(&attn.head(h), values, &params[h], &set, k)?;
                debug_assert_eq!(d.bias_part.len(), dh);
                updates.extend(d.bias_part);
                rest.extend(d.rest_part);
            }
        }
        let width = nh * dh;
        per_prompt.push(PromptUpdates {
            concentration: set.iter().collect(),
            first_query: first,
            updates: Tensor::matrix(t - first, width, updates)?,
            rest: Tensor::matrix(t - first, width, rest)?,
        });
    }

    let rows = |p: &PromptUpdates| (0..p.updates.rows()).map(|r| p.updates.row(r).to_vec()).collect::<Vec<_>>();
    let mut within = Vec::new();
    let mut within_l2 = Vec::new();
    for p in &per_prompt {
        let r = rows(p);
        let refs: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
        within.push(pairwise_cosine(&refs));
        within_l2.push(pairwise_l2(&refs));
    }
    let depth = per_prompt.iter().map(|p| p.updates.rows()).min().expect("non-empty");
    let mut across = Vec::new();
    let mut across_l2 = Vec::new();
    for o in 0..depth {
        let refs: Vec<&[f64]> = per_prompt.iter().map(|p| p.updates.row(o)).collect();
        across.push(pairwise_cosine(&refs));
        across_l2.push(pairwise_l2(&refs));
    }
    Ok(ValueUpdateSimilarity {
        prompts: per_prompt,
        within,
        within_l2,
        across,
        across_l2,
    })
}

/// Averaged attention maps of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttentionReport {
    pub layer: usize,
    /// Head mean of the scaled logits (the softmax input); NaN above the
    /// diagonal.
    pub logits_avg: Tensor,
    pub probs_avg: Tensor,
    /// Positions holding massive activations in the block input.
    pub concentration: Vec<usize>,
    pub concentration_score: f64,
    pub bias_slot_mass: Option<f64>,
    pub has_bias_column: bool,
}

/// Head-averaged logit and probability maps plus concentration scores for
/// the requested blocks.
pub fn attention_report(
    model: &Model,
    prompt: &[usize],
    layers: &[usize],
    profile: &DetectionProfile,
) -> Result<Vec<LayerAttentionReport>> {
    let ids = model.prepare(prompt)?;
    let pass = model.forward(std::slice::from_ref(&ids), &[], false)?;
    layers
        .iter()
        .map(|&layer| {
            if layer >= model.config.n_layers {
                return Err(LabError::InvalidArgument(format!(
                    "block {layer} outside a {}-block model",
                    model.config.n_layers
                )));
            }
            let attn = pass.attention(layer, 0);
            let set: BTreeSet<usize> = detect_massive_in_state(pass.state(layer), layer, &[], profile)?
                .into_iter()
                .map(|r| r.token_index)
                .collect();
            let set = ConcentrationSet::new(set);
            Ok(LayerAttentionReport {
                layer,
                logits_avg: attention_probs_avg(&attn, MapKind::Logits),
                probs_avg: attention_probs_avg(&attn, MapKind::Probs),
                concentration_score: concentration_score(&attn, &set)?,
                concentration: set.iter().collect(),
                bias_slot_mass: attn.bias_slot_mass(),
                has_bias_column: attn.has_bias_column,
            })
        })
        .collect()
}
