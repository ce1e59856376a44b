// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named parameter storage. Names and shapes follow the GPT-2 layout and are
//! a pure function of [`ModelConfig`].

use std::collections::BTreeMap;

use super::{ModelConfig, NormKind};
use crate::error::{LabError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    /// Weight decay applies to matrices only (weights and embeddings).
    pub fn decays(&self) -> bool {
        self.shape.len() == 2 && !self.name.contains("k_bias") && !self.name.contains("v_bias")
            && !self.name.contains("q_col") && !self.name.contains("k_col")
    }
}

/// Full parameter list for `config`, in name order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let (h, dh) = (config.n_heads, config.d_head());
    let rms = config.norm_kind == NormKind::Rmsnorm;
    let mut specs = vec![
        ParamSpec::new("wte", vec![config.embedding_rows(), d], Init::Normal),
        ParamSpec::new("wpe", vec![config.context_len, d], Init::Normal),
        ParamSpec::new("ln_f.g", vec![d], Init::Ones),
    ];
    if !rms {
        specs.push(ParamSpec::new("ln_f.b", vec![d], Init::Zeros));
    }
    for l in 0..config.n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        specs.push(ParamSpec::new(p("ln_1.g"), vec![d], Init::Ones));
        specs.push(ParamSpec::new(p("ln_2.g"), vec![d], Init::Ones));
        if !rms {
            specs.push(ParamSpec::new(p("ln_1.b"), vec![d], Init::Zeros));
            specs.push(ParamSpec::new(p("ln_2.b"), vec![d], Init::Zeros));
        }
        specs.push(ParamSpec::new(p("attn.c_attn.w"), vec![d, 3 * d], Init::Normal));
        specs.push(ParamSpec::new(p("attn.c_attn.b"), vec![3 * d], Init::Zeros));
        specs.push(ParamSpec::new(p("attn.c_proj.w"), vec![d, d], Init::Normal));
        specs.push(ParamSpec::new(p("attn.c_proj.b"), vec![d], Init::Zeros));
        specs.push(ParamSpec::new(p("mlp.c_fc.w"), vec![d, 4 * d], Init::Normal));
        specs.push(ParamSpec::new(p("mlp.c_fc.b"), vec![4 * d], Init::Zeros));
        specs.push(ParamSpec::new(p("mlp.c_proj.w"), vec![4 * d, d], Init::Normal));
        specs.push(ParamSpec::new(p("mlp.c_proj.b"), vec![d], Init::Zeros));
        let v = config.variant;
        if v.uses_k_bias() {
            specs.push(ParamSpec::new(p("attn.k_bias"), vec![h, dh], Init::Normal));
        }
        if v.uses_v_bias() {
            specs.push(ParamSpec::new(p("attn.v_bias"), vec![h, dh], Init::Normal));
        }
        if v.uses_position_columns() {
            specs.push(ParamSpec::new(p("attn.q_col"), vec![config.context_len, h], Init::Normal));
            specs.push(ParamSpec::new(p("attn.k_col"), vec![config.context_len, h], Init::Normal));
        }
    }
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    specs
}

/// Parameters keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Gaussian `N(0, 0.02^2)` weights and bias parameters, zero additive
    /// biases, unit gains. Draws follow name order from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let entries = param_specs(config)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Normal => rng::normal_vec(&mut rng, n, INIT_STD),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                let t = Tensor::new(spec.shape, data).expect("spec shapes are valid");
                (spec.name, t)
            })
            .collect();
        Self { entries }
    }

    /// Every parameter set to zero, gains included.
    pub fn zeros(config: &ModelConfig) -> Self {
        let entries = param_specs(config)
            .into_iter()
            .map(|s| {
                let t = Tensor::zeros(&s.shape);
                (s.name, t)
            })
            .collect();
        Self { entries }
    }

    /// Builds a store and checks it against the config's parameter table.
    pub fn from_entries(config: &ModelConfig, entries: BTreeMap<String, Tensor>) -> Result<Self> {
        let specs = param_specs(config);
        if specs.len() != entries.len() {
            return Err(LabError::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                entries.len()
            )));
        }
        for s in &specs {
            match entries.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(LabError::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(LabError::Checkpoint(format!("missing parameter `{}`", s.name))),
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub(crate) fn expect(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from validated store"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}
