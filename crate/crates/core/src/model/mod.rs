// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer in the GPT-2 layout.
//!
//! Each block computes `F(h) = a + mlp(norm2(h + a))` with
//! `a = proj(attn(norm1(h)))`, and the residual stream advances as
//! `h_next = h + F(h)`. Only these post-residual states form the trace; the
//! sub-block outputs are kept on the tape for debugging and trajectories.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, NormKind};
pub use params::{param_specs, Init, ParamSpec, ParamStore, INIT_STD};

use crate::attention::{attend_head, AttentionProbs, AttentionVariantParams, HeadOutput, HeadVars};
use crate::error::{LabError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Label used for the sink position in token strings.
pub const SINK_LABEL: &str = "[SINK]";

/// Post-residual hidden states of one forward pass: the embedding output
/// followed by the output of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateTrace {
    pub states: Vec<Tensor>,
    pub token_ids: Vec<usize>,
    pub token_strings: Vec<String>,
}

impl HiddenStateTrace {
    pub fn n_layers(&self) -> usize {
        self.states.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone)]
struct BlockVars {
    ln1_g: Var,
    ln1_b: Option<Var>,
    ln2_g: Var,
    ln2_b: Option<Var>,
    attn_w: Var,
    attn_b: Var,
    proj_w: Var,
    proj_b: Var,
    fc_w: Var,
    fc_b: Var,
    fc2_w: Var,
    fc2_b: Var,
    k_bias: Option<Var>,
    v_bias: Option<Var>,
    q_col: Option<Var>,
    k_col: Option<Var>,
}

/// Parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    wte: Var,
    wpe: Var,
    lnf_g: Var,
    lnf_b: Option<Var>,
    blocks: Vec<BlockVars>,
    named: Vec<(String, Var)>,
}

impl BoundParams {
    /// `(name, var)` for every parameter, in name order.
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Nodes recorded for one attention head of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub attn: HeadOutput,
}

/// Nodes recorded for one block.
#[derive(Debug, Clone)]
pub struct BlockNodes {
    pub input: Var,
    pub norm1: Var,
    /// `heads[sequence][head]`
    pub heads: Vec<Vec<HeadNodes>>,
    pub attn_out: Var,
    pub norm2: Var,
    pub mlp_out: Var,
    /// `F_l`, the full residual update.
    pub update: Var,
    pub output: Var,
}

/// Entries `(row, col, value)` written over one residual state mid-forward.
/// Rows index the flattened batch (`sequence * T + position`).
#[derive(Debug, Clone, PartialEq)]
pub struct StateEdit {
    pub layer: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

/// Everything recorded by [`Model::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub params: BoundParams,
    /// `states[0]` is the embedding output, `states[l]` the output of block `l`.
    pub states: Vec<Var>,
    pub blocks: Vec<BlockNodes>,
    pub logits: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub has_bias_column: bool,
}

impl ForwardPass {
    pub fn state(&self, layer: usize) -> &Tensor {
        self.tape.value(self.states[layer])
    }

    /// Rows of sequence `s` from a batched `[B*T x n]` node.
    pub fn rows_of(&self, v: Var, s: usize) -> Tensor {
        self.tape
            .value(v)
            .slice_rows(s * self.seq_len, self.seq_len)
            .expect("sequence index within batch")
    }

    /// Attention maps of `layer` (0-based block index) for sequence `s`.
    pub fn attention(&self, layer: usize, s: usize) -> AttentionProbs {
        let heads = &self.blocks[layer].heads[s];
        let probs: Vec<Tensor> = heads.iter().map(|h| self.tape.value(h.attn.probs).clone()).collect();
        let logits: Vec<Tensor> = heads.iter().map(|h| self.tape.value(h.attn.logits).clone()).collect();
        AttentionProbs::from_heads(&probs, &logits, self.has_bias_column).expect("heads share shape")
    }
}

/// Output of [`Model::forward_with_trace`].
#[derive(Debug, Clone)]
pub struct TracedForward {
    pub logits: Tensor,
    pub trace: HiddenStateTrace,
    pub attention: Vec<AttentionProbs>,
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::zeros(&config);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let checked: std::collections::BTreeMap<String, Tensor> =
            params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let params = ParamStore::from_entries(&config, checked)?;
        Ok(Self { config, params })
    }

    /// Model input for raw tokens: the sink id is prepended when enabled.
    pub fn prepare(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let max = self.config.max_tokens();
        if tokens.is_empty() {
            return Err(LabError::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > max {
            return Err(LabError::SequenceTooLong {
                len: tokens.len(),
                max,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LabError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.extend(self.config.sink_id());
        ids.extend_from_slice(tokens);
        Ok(ids)
    }

    /// Registers every parameter on `tape`; `trainable` marks them for gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut named = Vec::with_capacity(self.params.len());
        let mut add = |name: &str, tape: &mut Tape| -> Var {
            let t = self.params.expect(name).clone().with_requires_grad(trainable);
            let v = tape.leaf(t);
            named.push((name.to_string(), v));
            v
        };
        let rms = self.config.norm_kind == NormKind::Rmsnorm;
        let variant = self.config.variant;
        let wte = add("wte", tape);
        let wpe = add("wpe", tape);
        let lnf_g = add("ln_f.g", tape);
        let lnf_b = (!rms).then(|| add("ln_f.b", tape));
        let blocks = (0..self.config.n_layers)
            .map(|l| {
                let mut p = |s: &str| add(&format!("h.{l}.{s}"), tape);
                BlockVars {
                    ln1_g: p("ln_1.g"),
                    ln1_b: (!rms).then(|| p("ln_1.b")),
                    ln2_g: p("ln_2.g"),
                    ln2_b: (!rms).then(|| p("ln_2.b")),
                    attn_w: p("attn.c_attn.w"),
                    attn_b: p("attn.c_attn.b"),
                    proj_w: p("attn.c_proj.w"),
                    proj_b: p("attn.c_proj.b"),
                    fc_w: p("mlp.c_fc.w"),
                    fc_b: p("mlp.c_fc.b"),
                    fc2_w: p("mlp.c_proj.w"),
                    fc2_b: p("mlp.c_proj.b"),
                    k_bias: variant.uses_k_bias().then(|| p("attn.k_bias")),
                    v_bias: variant.uses_v_bias().then(|| p("attn.v_bias")),
                    q_col: variant.uses_position_columns().then(|| p("attn.q_col")),
                    k_col: variant.uses_position_columns().then(|| p("attn.k_col")),
                }
            })
            .collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        BoundParams {
            wte,
            wpe,
            lnf_g,
            lnf_b,
            blocks,
            named,
        }
    }

    fn norm(&self, tape: &mut Tape, x: Var, g: Var, b: Option<Var>) -> Result<Var> {
        let eps = self.config.norm_eps;
        match (self.config.norm_kind, b) {
            (NormKind::Layernorm, Some(b)) => tape.layer_norm(x, g, b, eps),
            (NormKind::Rmsnorm, None) => tape.rms_norm(x, g, eps),
            _ => Err(LabError::Config("norm parameters do not match norm kind".into())),
        }
    }

    /// Token plus position embeddings for a batch of prepared sequences of
    /// equal length, `[B*T x d]`.
    pub fn embed(&self, tape: &mut Tape, p: &BoundParams, batch: &[Vec<usize>]) -> Result<Var> {
        let t = batch.first().map_or(0, Vec::len);
        if t == 0 || batch.iter().any(|s| s.len() != t) {
            return Err(LabError::InvalidArgument(
                "batch sequences must be non-empty and of equal length".into(),
            ));
        }
        if t > self.config.context_len {
            return Err(LabError::SequenceTooLong {
                len: t,
                max: self.config.context_len,
            });
        }
        let ids: Vec<usize> = batch.concat();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..t).collect();
        let tok = tape.gather_rows(p.wte, &ids)?;
        let pos = tape.gather_rows(p.wpe, &positions)?;
        tape.add(tok, pos)
    }

    /// One transformer block over `[B*T x d]` input.
    pub fn block(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        layer: usize,
        h: Var,
        batch: usize,
        seq_len: usize,
    ) -> Result<BlockNodes> {
        let bv = &p.blocks[layer];
        let (d, nh, dh) = (self.config.d_model, self.config.n_heads, self.config.d_head());
        let variant = self.config.variant;

        let norm1 = self.norm(tape, h, bv.ln1_g, bv.ln1_b)?;
        let qkv = tape.matmul(norm1, bv.attn_w)?;
        let qkv = tape.add_row(qkv, bv.attn_b)?;

        let mut per_head = Vec::with_capacity(nh);
        for hh in 0..nh {
            let row = |tape: &mut Tape, v: Option<Var>| -> Result<Option<Var>> {
                v.map(|v| tape.slice(v, hh..hh + 1, 0..dh)).transpose()
            };
            let col = |tape: &mut Tape, v: Option<Var>| -> Result<Option<Var>> {
                v.map(|v| tape.slice(v, 0..self.config.context_len, hh..hh + 1))
                    .transpose()
            };
            per_head.push(HeadVars {
                k_bias: row(tape, bv.k_bias)?,
                v_bias: row(tape, bv.v_bias)?,
                q_col: col(tape, bv.q_col)?,
                k_col: col(tape, bv.k_col)?,
            });
        }

        let mut heads = Vec::with_capacity(batch);
        let mut seq_outs = Vec::with_capacity(batch);
        for s in 0..batch {
            let rows = s * seq_len..(s + 1) * seq_len;
            let mut nodes = Vec::with_capacity(nh);
            let mut outs = Vec::with_capacity(nh);
            for (hh, hv) in per_head.iter().enumerate() {
                let q = tape.slice(qkv, rows.clone(), hh * dh..(hh + 1) * dh)?;
                let k = tape.slice(qkv, rows.clone(), d + hh * dh..d + (hh + 1) * dh)?;
                let v = tape.slice(qkv, rows.clone(), 2 * d + hh * dh..2 * d + (hh + 1) * dh)?;
                let attn = attend_head(tape, q, k, v, variant, hv)?;
                outs.push(attn.out);
                nodes.push(HeadNodes { q, k, v, attn });
            }
            seq_outs.push(if nh == 1 { outs[0] } else { tape.concat_cols(&outs)? });
            heads.push(nodes);
        }
        let merged = if batch == 1 { seq_outs[0] } else { tape.concat_rows(&seq_outs)? };
        let attn_out = tape.matmul(merged, bv.proj_w)?;
        let attn_out = tape.add_row(attn_out, bv.proj_b)?;

        let mid = tape.add(h, attn_out)?;
        let norm2 = self.norm(tape, mid, bv.ln2_g, bv.ln2_b)?;
        let fc = tape.matmul(norm2, bv.fc_w)?;
        let fc = tape.add_row(fc, bv.fc_b)?;
        let act = tape.gelu(fc);
        let mlp_out = tape.matmul(act, bv.fc2_w)?;
        let mlp_out = tape.add_row(mlp_out, bv.fc2_b)?;

        let update = tape.add(attn_out, mlp_out)?;
        let output = tape.add(h, update)?;
        Ok(BlockNodes {
            input: h,
            norm1,
            heads,
            attn_out,
            norm2,
            mlp_out,
            update,
            output,
        })
    }

    /// Final norm and tied output head, `[B*T x vocab_size]`.
    pub fn head(&self, tape: &mut Tape, p: &BoundParams, h: Var) -> Result<Var> {
        let x = self.norm(tape, h, p.lnf_g, p.lnf_b)?;
        let table = if self.config.sink_token {
            tape.slice(p.wte, 0..self.config.vocab_size, 0..self.config.d_model)?
        } else {
            p.wte
        };
        tape.matmul_nt(x, table, 1.0)
    }

    /// Full forward over prepared, equal-length sequences. `edits` overwrite
    /// residual states as soon as they are produced.
    pub fn forward(&self, batch: &[Vec<usize>], edits: &[StateEdit], trainable: bool) -> Result<ForwardPass> {
        let l = self.config.n_layers;
        if let Some(e) = edits.iter().find(|e| e.layer > l) {
            return Err(LabError::InvalidArgument(format!(
                "edit targets state {} of a {l}-layer model",
                e.layer
            )));
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, trainable);
        let seq_len = batch.first().map_or(0, Vec::len);
        let apply = |tape: &mut Tape, layer: usize, mut v: Var| -> Result<Var> {
            for e in edits.iter().filter(|e| e.layer == layer) {
                v = tape.overwrite(v, &e.entries)?;
            }
            Ok(v)
        };

        let h0 = self.embed(&mut tape, &params, batch)?;
        let mut h = apply(&mut tape, 0, h0)?;
        let mut states = vec![h];
        let mut blocks = Vec::with_capacity(l);
        for layer in 0..l {
            let nodes = self.block(&mut tape, &params, layer, h, batch.len(), seq_len)?;
            h = apply(&mut tape, layer + 1, nodes.output)?;
            states.push(h);
            blocks.push(nodes);
        }
        let logits = self.head(&mut tape, &params, h)?;
        Ok(ForwardPass {
            tape,
            params,
            states,
            blocks,
            logits,
            batch: batch.len(),
            seq_len,
            has_bias_column: self.config.variant.has_bias_column(),
        })
    }

    /// Single-sequence forward returning logits, the residual-stream trace
    /// and per-layer attention maps. Positions include the sink when enabled.
    pub fn forward_with_trace(&self, tokens: &[usize]) -> Result<TracedForward> {
        self.forward_with_edits(tokens, &[])
    }

    pub(crate) fn forward_with_edits(&self, tokens: &[usize], edits: &[StateEdit]) -> Result<TracedForward> {
        let ids = self.prepare(tokens)?;
        let pass = self.forward(std::slice::from_ref(&ids), edits, false)?;
        Ok(self.traced(&pass, ids))
    }

    pub(crate) fn traced(&self, pass: &ForwardPass, ids: Vec<usize>) -> TracedForward {
        let states = pass.states.iter().map(|&v| pass.tape.value(v).clone()).collect();
        let attention = (0..self.config.n_layers).map(|l| pass.attention(l, 0)).collect();
        let token_strings = ids.iter().map(|&i| self.default_label(i)).collect();
        TracedForward {
            logits: pass.tape.value(pass.logits).clone(),
            trace: HiddenStateTrace {
                states,
                token_ids: ids,
                token_strings,
            },
            attention,
        }
    }

    /// Per-head bias parameters of block `layer` in the form the
    /// plain-tensor attention helpers take.
    pub fn attention_params(&self, layer: usize, head: usize) -> Result<AttentionVariantParams> {
        let nh = self.config.n_heads;
        if layer >= self.config.n_layers || head >= nh {
            return Err(LabError::InvalidArgument(format!(
                "block {layer} head {head} outside a {}-block, {nh}-head model",
                self.config.n_layers
            )));
        }
        let get = |s: &str| self.params.get(&format!("h.{layer}.attn.{s}"));
        let row = |s: &str| get(s).map(|t| t.row(head).to_vec());
        let col = |s: &str| get(s).map(|t| (0..t.rows()).map(|r| t.at(r, head)).collect::<Vec<f64>>());
        Ok(AttentionVariantParams {
            variant: self.config.variant,
            k_bias: row("k_bias"),
            v_bias: row("v_bias"),
            q_col: col("q_col"),
            k_col: col("k_col"),
        })
    }

    fn default_label(&self, id: usize) -> String {
        if Some(id) == self.config.sink_id() {
            SINK_LABEL.to_string()
        } else {
            format!("#{id}")
        }
    }
}
