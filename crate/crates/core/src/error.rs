// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by tensor math, model plumbing, analysis and I/O.
#[derive(Debug, Error)]
pub enum LabError {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor could not be built from the given shape and data.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Softmax over a row whose entries are all `-inf`.
    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    /// Loss requested with every position excluded.
    #[error("all positions are masked; nothing to average")]
    AllMasked,

    /// Optimizer received a NaN or infinite gradient.
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    /// A scalar that must be finite was not.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged.
    #[error("non-finite loss at step {step} (seed {seed})")]
    NonFiniteLoss { step: usize, seed: u64 },

    /// Invalid model, training or detector configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Attention variant parameters missing or superfluous.
    #[error("attention parameters: {0}")]
    AttentionParams(String),

    /// Token id outside the vocabulary.
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    /// Input longer than the model context.
    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// A token selector or target could not be resolved in a sequence.
    #[error("unresolvable selector in sequence {sequence}: {detail}")]
    Unresolvable { sequence: usize, detail: String },

    /// Generic precondition failure.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed or truncated checkpoint file.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
