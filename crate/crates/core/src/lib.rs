// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale laboratory for massive activations in decoder-only transformers.
//!
//! The crate trains small character-level GPT models with pluggable attention
//! bias variants and instruments them: residual-stream traces, massive
//! activation and outlier-feature detectors, mid-forward interventions,
//! attention concentration maps, attention-output decomposition and
//! normalization trajectories.

pub mod cli;
pub mod error;
pub mod instrumentation;
pub mod intervention;
pub mod analysis;
pub mod model;
pub mod report;
pub mod attention;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{LabError, Result};
pub use tensor::{Tape, Tensor, Var};
