// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "ACTLCKPT"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes UTF-8 JSON: config, seed, step, vocab, train_config,
//!                    and a table of {group, name, shape, offset, len}
//! blocks   raw little-endian f64 values; `offset` is in bytes from the
//!          start of this section, `len` in elements
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{LabError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACTLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// A model plus the training context needed to audit or resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerSnapshot>,
    pub step: u64,
    pub seed: u64,
    /// Token strings by id, when the model was trained on a corpus.
    pub vocab: Option<Vec<String>>,
    /// Resolved training configuration, kept verbatim for auditing.
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    step: u64,
    optimizer_step: Option<u64>,
    vocab: Option<Vec<String>>,
    train_config: Option<serde_json::Value>,
    tensors: Vec<TableEntry>,
}

const GROUP_PARAM: &str = "param";
const GROUP_M: &str = "adam_m";
const GROUP_V: &str = "adam_v";

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            seed,
            vocab: None,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks: Vec<(&str, &str, Vec<usize>, &[f64])> = Vec::new();
        for (name, t) in self.model.params.iter() {
            blocks.push((GROUP_PARAM, name, t.shape().to_vec(), t.data()));
        }
        if let Some(opt) = &self.optimizer {
            for (group, map) in [(GROUP_M, &opt.m), (GROUP_V, &opt.v)] {
                for (name, data) in map {
                    blocks.push((group, name, vec![data.len()], data));
                }
            }
        }
        let mut offset = 0u64;
        let tensors = blocks
            .iter()
            .map(|(group, name, shape, data)| {
                let e = TableEntry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: shape.clone(),
                    offset,
                    len: data.len() as u64,
                };
                offset += 8 * data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            seed: self.seed,
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            vocab: self.vocab.clone(),
            train_config: self.train_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, _, data) in &blocks {
            for x in data.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LabError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(LabError::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[20 + hlen..];

        let mut expected_end = 0u64;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            let raw = data.get(start..end).ok_or_else(|| {
                LabError::Checkpoint(format!("block `{}/{}` is truncated", e.group, e.name))
            })?;
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(LabError::Checkpoint(format!(
                    "block `{}/{}` length disagrees with its shape",
                    e.group, e.name
                )));
            }
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_end = expected_end.max(end as u64);
            match e.group.as_str() {
                GROUP_PARAM => {
                    params.insert(e.name, Tensor::new(e.shape, values)?);
                }
                GROUP_M => {
                    m.insert(e.name, values);
                }
                GROUP_V => {
                    v.insert(e.name, values);
                }
                other => return Err(LabError::Checkpoint(format!("unknown block group `{other}`"))),
            }
        }
        if expected_end != data.len() as u64 {
            return Err(bad("trailing bytes after the last block"));
        }
        header.config.validate()?;
        let store = ParamStore::from_entries(&header.config, params)?;
        let optimizer = header.optimizer_step.map(|step| OptimizerSnapshot { step, m, v });
        Ok(Self {
            model: Model {
                config: header.config,
                params: store,
            },
            optimizer,
            step: header.step,
            seed: header.seed,
            vocab: header.vocab,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
