// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Command;
use crate::error::Result;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    /// Resolved configuration (training config or the checkpoint's model config).
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    /// sha256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<String>,
    /// sha256 over everything above except the output directory and the
    /// output list.
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl RunManifest {
    pub fn new(command: Command, config: serde_json::Value, seed: u64, inputs: BTreeMap<String, String>) -> Result<Self> {
        let mut m = Self {
            command,
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs: Vec::new(),
            digest: String::new(),
        };
        m.digest = m.compute_digest()?;
        Ok(m)
    }

    pub fn compute_digest(&self) -> Result<String> {
        let mut cmd = serde_json::to_value(&self.command)?;
        if let Some(args) = cmd.as_object_mut().and_then(|o| o.values_mut().next()) {
            if let Some(a) = args.as_object_mut() {
                a.remove("out");
            }
        }
        let canon = serde_json::json!({
            "command": cmd,
            "config": self.config,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "inputs": self.inputs,
        });
        Ok(sha256_hex(serde_json::to_string(&canon)?.as_bytes()))
    }
}
