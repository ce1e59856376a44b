// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out`.
//! Numeric outputs start with `#` comment lines (CSV) or a `_header` object
//! (JSON) carrying the manifest digest and the detection profile.
//! `replay` re-runs a manifest, optionally into another directory.

mod commands;
mod manifest;

pub use manifest::{file_digest, sha256_hex, RunManifest, MANIFEST_NAME};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::instrumentation::DetectionProfile;

#[derive(Debug, Parser)]
#[command(name = "actlab", version, about = "Massive-activation laboratory for small GPT models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train a model on a text corpus.
    Train(TrainArgs),
    /// Write a freshly initialized (or all-zero) checkpoint.
    Init(InitArgs),
    /// Per-layer top-k and median magnitudes.
    Stats(StatsArgs),
    /// Massive activations and outlier features.
    Detect(DetectArgs),
    /// Mean and spread of chosen activations across a corpus.
    Posstats(PosstatsArgs),
    /// Perplexity with activations zeroed or set to their means.
    Intervene(InterveneArgs),
    /// Head-averaged attention maps and concentration scores.
    Attnmap(AttnmapArgs),
    /// Value updates from the concentration set and their similarity.
    Decompose(DecomposeArgs),
    /// States through the attention normalization of one block.
    Trajectory(TrajectoryArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

/// Detection thresholds; the full-scale profile by default.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    /// Magnitude an activation must exceed.
    #[arg(long)]
    pub abs_threshold: Option<f64>,
    /// Multiple of the state's median magnitude an activation must reach.
    #[arg(long)]
    pub ratio_threshold: Option<f64>,
    /// Start from the relaxed desk-scale profile (abs 10, ratio 100).
    #[arg(long)]
    pub toy: bool,
}

impl ProfileArgs {
    pub fn profile(&self) -> DetectionProfile {
        let base = if self.toy {
            DetectionProfile::toy()
        } else {
            DetectionProfile::default()
        };
        DetectionProfile {
            abs_threshold: self.abs_threshold.unwrap_or(base.abs_threshold),
            ratio_threshold: self.ratio_threshold.unwrap_or(base.ratio_threshold),
        }
    }
}

/// Where the analysed token sequences come from.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// Text prompt, encoded with the checkpoint vocabulary.
    #[arg(long)]
    pub prompt: Vec<String>,
    /// Comma-separated token ids, for checkpoints without a vocabulary.
    #[arg(long)]
    pub ids: Option<String>,
    /// Text file cut into consecutive sequences of `--seq-len` characters.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sequence length when reading `--corpus`.
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Most sequences read from `--corpus`.
    #[arg(long, default_value_t = 100)]
    pub max_seqs: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training config (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Attention variant, overriding the config.
    #[arg(long)]
    pub variant: Option<String>,
    /// Prepend a learnable sink token.
    #[arg(long)]
    pub sink: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InitArgs {
    /// Model config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Attach the vocabulary of this text file (and size the model to it).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Set every parameter, gains included, to zero.
    #[arg(long)]
    pub zero: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Outlier-feature magnitude threshold.
    #[arg(long, default_value_t = 6.0)]
    pub outlier_magnitude: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PosstatsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// JSON list of `{"layer", "token": {"index"|"first_id"|"rank": n}, "feature"}`.
    #[arg(long)]
    pub positions: PathBuf,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InterveneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Intervention spec (JSON); its mode is replaced by zero and mean.
    #[arg(long)]
    pub spec: PathBuf,
    /// Calibration corpus for the means; defaults to the evaluation input.
    #[arg(long)]
    pub calib_corpus: Option<PathBuf>,
    /// Retarget to the same number of median-magnitude activations.
    #[arg(long)]
    pub control: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AttnmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Block index (repeatable); all blocks when omitted.
    #[arg(long)]
    pub layer: Vec<usize>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Concentration set, e.g. `index:0,first_char:.` or `first_id:4`.
    #[arg(long, default_value = "index:0")]
    pub concentration: String,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; the recorded one when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, crate::error::LabError::Config(_) | crate::error::LabError::InvalidArgument(_)) {
                eprintln!("(see --help)");
            }
            1
        }
    }
}

/// Runs an already parsed command and returns its manifest.
pub fn execute(command: Command) -> crate::Result<RunManifest> {
    commands::execute(command)
}
