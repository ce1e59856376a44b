// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{LabError, Result};

/// Which normalization the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Layernorm,
    Rmsnorm,
}

/// Shape and flavour of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Size of the real vocabulary. A sink token, when enabled, takes id
    /// `vocab_size` on top of this. Zero in a training config means "size of
    /// the corpus alphabet".
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub norm_kind: NormKind,
    #[serde(default)]
    pub variant: AttentionVariant,
    #[serde(default)]
    pub sink_token: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context_len: 256,
            vocab_size: 65,
            norm_kind: NormKind::Layernorm,
            variant: AttentionVariant::Standard,
            sink_token: false,
            norm_eps: default_eps(),
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LabError::Config(m));
        if self.n_layers < 1 {
            return fail("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2".into());
        }
        if self.context_len < 1 + usize::from(self.sink_token) {
            return fail("context_len too small".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be > 0".into());
        }
        Ok(())
    }

    /// Rows of the token embedding table.
    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + usize::from(self.sink_token)
    }

    pub fn sink_id(&self) -> Option<usize> {
        self.sink_token.then_some(self.vocab_size)
    }

    /// Longest raw token sequence accepted (the sink takes one slot).
    pub fn max_tokens(&self) -> usize {
        self.context_len - usize::from(self.sink_token)
    }

    /// Positions occupied by the sink before the raw tokens.
    pub fn prefix_len(&self) -> usize {
        usize::from(self.sink_token)
    }
}
