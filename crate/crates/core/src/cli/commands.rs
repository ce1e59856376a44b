// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::manifest::{file_digest, RunManifest, MANIFEST_NAME};
use super::*;
use crate::analysis::{attention_report, norm_trajectory, value_update_similarity};
use crate::attention::AttentionVariant;
use crate::error::{LabError, Result};
use crate::instrumentation::{
    detect_massive, detect_outlier_features, DetectionProfile, feature_overlap, json_num, layer_stats, position_stats,
    position_stats_csv, OutlierThresholds, PositionKey, TokenSelector,
};
use crate::intervention::{calibrate_means, control_spec, perplexity, InterventionMode, InterventionSpec};
use crate::model::{Checkpoint, Model, ModelConfig, SINK_LABEL};
use crate::report::{fmt_num, to_sorted_json, write_atomic, Csv};
use crate::tensor::Tensor;
use crate::trainer::{eval_windows, history_csv, train, Corpus, TrainConfig, Vocab};

/// Output directory plus what every file header needs.
struct Sink {
    out: PathBuf,
    digest: String,
    profile: DetectionProfile,
    outputs: Vec<String>,
}

impl Sink {
    fn csv(&mut self, name: &str, notes: &[String], body: &Csv) -> Result<()> {
        let mut text = Csv::new();
        text.comment(format!("manifest_digest={}", self.digest));
        text.comment(format!("profile: {}", self.profile.describe()));
        for n in notes {
            text.comment(n);
        }
        let full = text.finish() + &body.finish();
        self.bytes(name, full.as_bytes())
    }

    fn json(&mut self, name: &str, mut value: Value) -> Result<()> {
        if let Some(o) = value.as_object_mut() {
            o.insert(
                "_header".into(),
                json!({ "manifest_digest": self.digest, "profile": self.profile }),
            );
        }
        self.bytes(name, to_sorted_json(&value)?.as_bytes())
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

/// Records the digest of each input file as it is read.
#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| {
            LabError::InvalidArgument(format!("cannot read {}: {e}", path.display()))
        })?;
        self.0.insert(path.display().to_string(), super::sha256_hex(&bytes));
        Ok(bytes)
    }

    fn text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?)
            .map_err(|_| LabError::InvalidArgument(format!("{} is not UTF-8", path.display())))
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&self.read(path)?)
    }
}

pub(super) fn execute(command: Command) -> Result<RunManifest> {
    if let Command::Replay(r) = command {
        return replay(&r);
    }
    let mut inputs = Inputs::default();
    let plan = prepare(&command, &mut inputs)?;
    let mut manifest = RunManifest::new(command.clone(), plan.config.clone(), plan.seed, inputs.0)?;
    let mut sink = Sink {
        out: out_dir(&command).to_path_buf(),
        digest: manifest.digest.clone(),
        profile: plan.profile,
        outputs: Vec::new(),
    };
    std::fs::create_dir_all(&sink.out)?;
    (plan.run)(&mut sink)?;
    manifest.outputs = sink.outputs;
    write_atomic(&sink.out.join(MANIFEST_NAME), to_sorted_json(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn replay(args: &ReplayArgs) -> Result<RunManifest> {
    let text = std::fs::read_to_string(&args.manifest)?;
    let recorded: RunManifest = serde_json::from_str(&text)?;
    for (path, digest) in &recorded.inputs {
        let now = file_digest(Path::new(path))?;
        if &now != digest {
            return Err(LabError::InvalidArgument(format!(
                "input {path} changed since the manifest was written"
            )));
        }
    }
    let mut command = recorded.command.clone();
    if let Some(out) = &args.out {
        set_out(&mut command, out.clone());
    }
    let m = execute(command)?;
    if m.digest != recorded.digest {
        return Err(LabError::InvalidArgument("replayed run resolved to a different manifest digest".into()));
    }
    Ok(m)
}

fn out_dir(c: &Command) -> &Path {
    match c {
        Command::Train(a) => &a.out,
        Command::Init(a) => &a.out,
        Command::Stats(a) => &a.out,
        Command::Detect(a) => &a.out,
        Command::Posstats(a) => &a.out,
        Command::Intervene(a) => &a.out,
        Command::Attnmap(a) => &a.out,
        Command::Decompose(a) => &a.out,
        Command::Trajectory(a) => &a.out,
        Command::Replay(_) => unreachable!("replay is resolved first"),
    }
}

fn set_out(c: &mut Command, out: PathBuf) {
    match c {
        Command::Train(a) => a.out = out,
        Command::Init(a) => a.out = out,
        Command::Stats(a) => a.out = out,
        Command::Detect(a) => a.out = out,
        Command::Posstats(a) => a.out = out,
        Command::Intervene(a) => a.out = out,
        Command::Attnmap(a) => a.out = out,
        Command::Decompose(a) => a.out = out,
        Command::Trajectory(a) => a.out = out,
        Command::Replay(_) => {}
    }
}

type Job<'a> = Box<dyn FnOnce(&mut Sink) -> Result<()> + 'a>;

/// Inputs read and validated; `run` produces the outputs.
struct Plan<'a> {
    config: Value,
    seed: u64,
    profile: DetectionProfile,
    run: Job<'a>,
}

fn prepare<'a>(command: &'a Command, inputs: &mut Inputs) -> Result<Plan<'a>> {
    match command {
        Command::Train(a) => plan_train(a, inputs),
        Command::Init(a) => plan_init(a, inputs),
        Command::Stats(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let k = a.topk;
            analysis_plan(meta(&ck)?, a.profile.profile(), Box::new(move |s| cmd_stats(s, &ck, &seqs, k)))
        }
        Command::Detect(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let profile = a.profile.profile();
            let mag = a.outlier_magnitude;
            analysis_plan(meta(&ck)?, profile, Box::new(move |s| cmd_detect(s, &ck, &seqs, profile, mag)))
        }
        Command::Posstats(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let keys: Vec<PositionKey> = serde_json::from_str(&inputs.text(&a.positions)?)?;
            analysis_plan(meta(&ck)?, a.profile.profile(), Box::new(move |s| cmd_posstats(s, &ck, &seqs, &keys)))
        }
        Command::Intervene(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let spec = InterventionSpec::from_json(&inputs.text(&a.spec)?)?;
            let calib = match &a.calib_corpus {
                Some(p) => {
                    let input = InputArgs {
                        corpus: Some(p.clone()),
                        prompt: Vec::new(),
                        ids: None,
                        ..a.input.clone()
                    };
                    sequences(&input, &ck, inputs)?
                }
                None => seqs.clone(),
            };
            let mut plan = analysis_plan(meta(&ck)?, a.profile.profile(), Box::new(|_| Ok(())))?;
            plan.seed = a.seed;
            let (control, seed) = (a.control, a.seed);
            plan.run = Box::new(move |s| cmd_intervene(s, &ck, &seqs, &calib, spec, control, seed));
            Ok(plan)
        }
        Command::Attnmap(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let profile = a.profile.profile();
            let layers = if a.layer.is_empty() {
                (0..ck.model.config.n_layers).collect()
            } else {
                a.layer.clone()
            };
            analysis_plan(meta(&ck)?, profile, Box::new(move |s| cmd_attnmap(s, &ck, &seqs[0], &layers, profile)))
        }
        Command::Decompose(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let set = parse_concentration(&a.concentration, ck.vocab.as_deref())?;
            let layer = a.layer;
            analysis_plan(meta(&ck)?, a.profile.profile(), Box::new(move |s| cmd_decompose(s, &ck, &seqs, layer, &set)))
        }
        Command::Trajectory(a) => {
            let (ck, seqs) = load(&a.ckpt, &a.input, inputs)?;
            let profile = a.profile.profile();
            let layer = a.layer;
            analysis_plan(meta(&ck)?, profile, Box::new(move |s| cmd_trajectory(s, &ck, &seqs[0], layer, profile)))
        }
        Command::Replay(_) => unreachable!("replay is resolved first"),
    }
}

fn meta(ck: &Checkpoint) -> Result<(Value, u64)> {
    Ok((serde_json::to_value(&ck.model.config)?, ck.seed))
}

fn analysis_plan<'a>(
    (config, seed): (Value, u64),
    profile: DetectionProfile,
    run: Job<'a>,
) -> Result<Plan<'a>> {
    profile.validate()?;
    Ok(Plan { config, seed, profile, run })
}

fn parse_variant(name: &Option<String>) -> Result<Option<AttentionVariant>> {
    name.as_deref()
        .map(|n| n.parse::<AttentionVariant>().map_err(|e| LabError::Config(e.to_string())))
        .transpose()
}

fn plan_train<'a>(a: &'a TrainArgs, inputs: &mut Inputs) -> Result<Plan<'a>> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&inputs.text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = parse_variant(&a.variant)? {
        cfg.model.variant = v;
    }
    if a.sink {
        cfg.model.sink_token = true;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let text = inputs.text(&a.corpus)?;
    let corpus = Corpus::from_text(&text, cfg.val_fraction)?;
    let cfg = cfg.resolve(&corpus)?;
    let profile = a.profile.profile();
    profile.validate()?;
    Ok(Plan {
        config: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        profile,
        run: Box::new(move |s| cmd_train(s, corpus, cfg)),
    })
}

fn plan_init<'a>(a: &'a InitArgs, inputs: &mut Inputs) -> Result<Plan<'a>> {
    let mut cfg: ModelConfig = match &a.config {
        Some(p) => serde_json::from_str(&inputs.text(p)?)?,
        None => ModelConfig::default(),
    };
    if let Some(v) = parse_variant(&a.variant)? {
        cfg.variant = v;
    }
    let vocab = match &a.corpus {
        Some(p) => {
            let v = Vocab::from_text(&inputs.text(p)?);
            if cfg.vocab_size == 0 || cfg.vocab_size < v.len() {
                cfg.vocab_size = v.len().max(2);
            }
            Some(v.to_strings())
        }
        None => None,
    };
    let model = if a.zero {
        Model::zeroed(cfg)?
    } else {
        Model::init(cfg, a.seed)?
    };
    let profile = a.profile.profile();
    profile.validate()?;
    let seed = a.seed;
    Ok(Plan {
        config: serde_json::to_value(&model.config)?,
        seed,
        profile,
        run: Box::new(move |s| {
            let mut ck = Checkpoint::new(model, seed);
            ck.vocab = vocab;
            s.bytes("checkpoint.bin", &ck.to_bytes()?)
        }),
    })
}

fn load(ckpt: &Path, input: &InputArgs, inputs: &mut Inputs) -> Result<(Checkpoint, Vec<Vec<usize>>)> {
    let ck = inputs.checkpoint(ckpt)?;
    let seqs = sequences(input, &ck, inputs)?;
    Ok((ck, seqs))
}

fn vocab_of(ck: &Checkpoint) -> Result<Vocab> {
    let v = ck.vocab.as_ref().ok_or_else(|| {
        LabError::InvalidArgument("checkpoint has no vocabulary; pass token ids with --ids".into())
    })?;
    Vocab::from_strings(v)
}

/// Token sequences named by the input flags: prompts, then `--ids`, then
/// corpus chunks.
fn sequences(input: &InputArgs, ck: &Checkpoint, inputs: &mut Inputs) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for p in &input.prompt {
        out.push(vocab_of(ck)?.encode(p)?);
    }
    if let Some(ids) = &input.ids {
        let parsed = ids
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| LabError::InvalidArgument(format!("bad token id `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(parsed);
    }
    if let Some(path) = &input.corpus {
        if input.seq_len < 2 || input.seq_len > ck.model.config.max_tokens() {
            return Err(LabError::InvalidArgument(format!(
                "--seq-len must lie in 2..={}",
                ck.model.config.max_tokens()
            )));
        }
        let vocab = vocab_of(ck)?;
        let text = inputs.text(path)?;
        let ids = vocab.encode(&text)?;
        out.extend(
            ids.chunks_exact(input.seq_len)
                .take(input.max_seqs)
                .map(<[usize]>::to_vec),
        );
    }
    if out.is_empty() {
        return Err(LabError::InvalidArgument(
            "no input: pass --prompt, --ids or --corpus".into(),
        ));
    }
    Ok(out)
}

fn label(ck: &Checkpoint, id: usize) -> String {
    if Some(id) == ck.model.config.sink_id() {
        return SINK_LABEL.to_string();
    }
    match ck.vocab.as_ref().and_then(|v| v.get(id)) {
        Some(s) => match s.as_str() {
            "\n" => "\\n".into(),
            "\t" => "\\t".into(),
            "\r" => "\\r".into(),
            _ => s.clone(),
        },
        None => format!("#{id}"),
    }
}

fn traces(ck: &Checkpoint, seqs: &[Vec<usize>]) -> Result<Vec<crate::model::HiddenStateTrace>> {
    seqs.iter()
        .map(|s| {
            let mut t = ck.model.forward_with_trace(s)?.trace;
            t.token_strings = t.token_ids.iter().map(|&i| label(ck, i)).collect();
            Ok(t)
        })
        .collect()
}

fn cmd_train(s: &mut Sink, corpus: Corpus, cfg: TrainConfig) -> Result<()> {
    let windows = eval_windows(corpus.val_ids(), &cfg)?;
    let out = train(corpus, cfg.clone())?;
    let ck = out.checkpoint;
    s.bytes("checkpoint.bin", &ck.to_bytes()?)?;
    s.csv("loss.csv", &[], &history_csv(&out.history))?;

    // reports on the validation windows
    let seqs: Vec<Vec<usize>> = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    s.csv(
        "profile.csv",
        &[format!("aggregate: mean over {} validation windows", seqs.len())],
        &mean_profile(&ck, &seqs, 3)?,
    )?;
    let mut totals = vec![0.0; ck.model.config.n_layers];
    for sq in &seqs {
        let traced = ck.model.forward_with_trace(sq)?;
        for (t, a) in totals.iter_mut().zip(&traced.attention) {
            *t += a.bias_slot_mass().unwrap_or(f64::NAN);
        }
    }
    let mut mass = Csv::new();
    mass.header(&["layer", "bias_slot_mass"]);
    for (l, t) in totals.iter().enumerate() {
        mass.row(&[l.to_string(), fmt_num(t / seqs.len() as f64)]);
    }
    s.csv("bias_slot_mass.csv", &[], &mass)?;
    let summary = json!({
        "final_val_loss": json_num(out.final_val_loss),
        "ln_vocab": (ck.model.config.vocab_size as f64).ln(),
        "iterations": cfg.iterations,
        "variant": ck.model.config.variant.name(),
        "sink_token": ck.model.config.sink_token,
        "parameters": ck.model.params.num_scalars(),
    });
    s.json("summary.json", summary)
}

/// Per-layer top-k and median magnitudes averaged over sequences.
fn mean_profile(ck: &Checkpoint, seqs: &[Vec<usize>], k: usize) -> Result<Csv> {
    let l = ck.model.config.n_layers + 1;
    let mut tops = vec![vec![0.0; k]; l];
    let mut medians = vec![0.0; l];
    for t in traces(ck, seqs)? {
        for st in layer_stats(&t, k)? {
            for (i, e) in st.top.iter().enumerate() {
                tops[st.layer][i] += e.magnitude;
            }
            medians[st.layer] += st.median_magnitude;
        }
    }
    let n = seqs.len() as f64;
    let mut csv = Csv::new();
    let mut header = vec!["layer".to_string()];
    header.extend((1..=k).map(|i| format!("top{i}")));
    header.push("median".into());
    csv.header(&header);
    for layer in 0..l {
        let mut row = vec![layer.to_string()];
        row.extend(tops[layer].iter().map(|x| fmt_num(x / n)));
        row.push(fmt_num(medians[layer] / n));
        csv.row(&row);
    }
    Ok(csv)
}

fn cmd_stats(s: &mut Sink, ck: &Checkpoint, seqs: &[Vec<usize>], k: usize) -> Result<()> {
    if k < 1 {
        return Err(LabError::InvalidArgument("--topk must be >= 1".into()));
    }
    let note = format!("aggregate: mean over {} sequence(s); layer 0 is the embedding output", seqs.len());
    s.csv("stats.csv", &[note], &mean_profile(ck, seqs, k)?)
}

fn cmd_detect(
    s: &mut Sink,
    ck: &Checkpoint,
    seqs: &[Vec<usize>],
    profile: DetectionProfile,
    magnitude: f64,
) -> Result<()> {
    let traces = traces(ck, seqs)?;
    let mut records = Vec::new();
    let mut all = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        for r in detect_massive(t, &profile)? {
            let mut j = r.to_json();
            j["sequence"] = json!(i);
            records.push(j);
            all.push(r);
        }
    }
    let th = OutlierThresholds {
        magnitude,
        ..OutlierThresholds::default()
    };
    let outliers = detect_outlier_features(&traces, &th)?;
    let overlap = feature_overlap(&all, &outliers);
    let massive_features: std::collections::BTreeSet<usize> = all.iter().map(|r| r.feature_index).collect();
    let out = json!({
        "sequences": seqs.len(),
        "records": records,
        "massive_features": massive_features,
        "outlier_features": outliers,
        "outlier_thresholds": th,
        "overlap": overlap,
        "overlap_empty": overlap.is_empty(),
    });
    s.json("detect.json", out)
}

fn cmd_posstats(s: &mut Sink, ck: &Checkpoint, seqs: &[Vec<usize>], keys: &[PositionKey]) -> Result<()> {
    let stats = position_stats(&traces(ck, seqs)?, keys)?;
    s.csv("posstats.csv", &[format!("sequences={}", seqs.len())], &position_stats_csv(&stats))
}

fn cmd_intervene(
    s: &mut Sink,
    ck: &Checkpoint,
    windows: &[Vec<usize>],
    calib_seqs: &[Vec<usize>],
    spec: InterventionSpec,
    control: bool,
    seed: u64,
) -> Result<()> {
    let model = &ck.model;
    let calib_inputs: Vec<Vec<usize>> = calib_seqs.iter().map(|w| w[..w.len().saturating_sub(1).max(1)].to_vec()).collect();
    let spec = if control {
        control_spec(model, &calib_inputs, &spec)?
    } else {
        spec
    };
    let zero = InterventionSpec {
        mode: InterventionMode::Zero,
        ..spec.clone()
    };
    let mean = InterventionSpec {
        mode: InterventionMode::Mean,
        ..spec.clone()
    };
    let calib = calibrate_means(model, &calib_inputs, &mean, seed)?;
    let original = perplexity(model, windows, None)?;
    let set_zero = perplexity(model, windows, Some((&zero, None)))?;
    let set_mean = perplexity(model, windows, Some((&mean, Some(&calib))))?;
    let mut csv = Csv::new();
    csv.header(&["condition", "perplexity"]);
    csv.row(&["original".to_string(), fmt_num(original)]);
    csv.row(&["set_to_zero".to_string(), fmt_num(set_zero)]);
    csv.row(&["set_to_mean".to_string(), fmt_num(set_mean)]);
    let notes = vec![
        format!("layer={} targets={} control={control}", spec.layer, spec.targets.len()),
        format!("windows={} calibration_sequences={}", windows.len(), calib.corpus_size),
    ];
    s.csv("intervene.csv", &notes, &csv)?;
    let detail = json!({
        "spec": spec,
        "calibration": calib,
        "perplexity": {
            "original": json_num(original),
            "set_to_zero": json_num(set_zero),
            "set_to_mean": json_num(set_mean),
        },
    });
    s.json("intervene.json", detail)
}

fn matrix_csv(t: &Tensor, rows: &[String], cols: &[String]) -> Csv {
    let mut csv = Csv::new();
    let mut header = vec!["query".to_string()];
    header.extend(cols.iter().cloned());
    csv.header(&header);
    for (r, name) in rows.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(t.row(r).iter().map(|&x| fmt_num(x)));
        csv.row(&row);
    }
    csv
}

fn cmd_attnmap(
    s: &mut Sink,
    ck: &Checkpoint,
    prompt: &[usize],
    layers: &[usize],
    profile: DetectionProfile,
) -> Result<()> {
    let reports = attention_report(&ck.model, prompt, layers, &profile)?;
    let ids = ck.model.prepare(prompt)?;
    let labels: Vec<String> = ids.iter().enumerate().map(|(i, &t)| format!("{i}:{}", label(ck, t))).collect();
    let mut summary = Csv::new();
    summary.header(&["layer", "concentration_score", "bias_slot_mass", "concentration"]);
    for r in &reports {
        let mut cols = labels.clone();
        if r.has_bias_column {
            cols.push("BIAS".into());
        }
        s.csv(
            &format!("attn_l{}_probs.csv", r.layer),
            &["map: head-mean attention probability".into()],
            &matrix_csv(&r.probs_avg, &labels, &cols),
        )?;
        s.csv(
            &format!("attn_l{}_logits.csv", r.layer),
            &["map: head-mean attention logit after 1/sqrt(d_head) scaling; empty above the diagonal".into()],
            &matrix_csv(&r.logits_avg, &labels, &cols),
        )?;
        let set: Vec<String> = r.concentration.iter().map(|i| i.to_string()).collect();
        summary.row(&[
            r.layer.to_string(),
            fmt_num(r.concentration_score),
            r.bias_slot_mass.map_or(String::new(), fmt_num),
            set.join(" "),
        ]);
    }
    s.csv("attn_summary.csv", &[], &summary)
}

fn parse_concentration(text: &str, vocab: Option<&[String]>) -> Result<Vec<TokenSelector>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            let (kind, arg) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| LabError::InvalidArgument(format!("bad selector `{part}`")))?;
            let num = || {
                arg.parse::<usize>()
                    .map_err(|_| LabError::InvalidArgument(format!("bad selector `{part}`")))
            };
            match kind {
                "index" => Ok(TokenSelector::Index(num()?)),
                "first_id" => Ok(TokenSelector::FirstId(num()?)),
                "first_char" => {
                    let v = vocab.ok_or_else(|| {
                        LabError::InvalidArgument("first_char needs a checkpoint vocabulary".into())
                    })?;
                    let id = v.iter().position(|s| s == arg).ok_or_else(|| {
                        LabError::InvalidArgument(format!("`{arg}` is not in the vocabulary"))
                    })?;
                    Ok(TokenSelector::FirstId(id))
                }
                _ => Err(LabError::InvalidArgument(format!("bad selector `{part}`"))),
            }
        })
        .collect()
}

fn cmd_decompose(s: &mut Sink, ck: &Checkpoint, prompts: &[Vec<usize>], layer: usize, set: &[TokenSelector]) -> Result<()> {
    let sim = value_update_similarity(&ck.model, prompts, layer, set)?;
    let mut within = Csv::new();
    within.header(&["prompt", "query_a", "query_b", "cosine", "l2"]);
    for (p, (cos, l2)) in sim.within.iter().zip(&sim.within_l2).enumerate() {
        let first = sim.prompts[p].first_query;
        for i in 0..cos.rows() {
            for j in 0..cos.cols() {
                within.row(&[
                    p.to_string(),
                    (first + i).to_string(),
                    (first + j).to_string(),
                    fmt_num(cos.at(i, j)),
                    fmt_num(l2.at(i, j)),
                ]);
            }
        }
    }
    let mut across = Csv::new();
    across.header(&["offset", "prompt_a", "prompt_b", "cosine", "l2"]);
    for (o, (cos, l2)) in sim.across.iter().zip(&sim.across_l2).enumerate() {
        for i in 0..cos.rows() {
            for j in 0..cos.cols() {
                across.row(&[o.to_string(), i.to_string(), j.to_string(), fmt_num(cos.at(i, j)), fmt_num(l2.at(i, j))]);
            }
        }
    }
    let mut parts = Csv::new();
    parts.header(&["prompt", "query", "token", "concentration_norm", "rest_norm"]);
    for (p, pu) in sim.prompts.iter().enumerate() {
        let ids = ck.model.prepare(&prompts[p])?;
        for r in 0..pu.updates.rows() {
            let q = pu.first_query + r;
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            parts.row(&[
                p.to_string(),
                q.to_string(),
                label(ck, ids[q]),
                fmt_num(norm(pu.updates.row(r))),
                fmt_num(norm(pu.rest.row(r))),
            ]);
        }
    }
    let note = format!(
        "block={layer} concentration={}",
        set.iter().map(TokenSelector::describe).collect::<Vec<_>>().join(" ")
    );
    s.csv("within.csv", std::slice::from_ref(&note), &within)?;
    s.csv("across.csv", std::slice::from_ref(&note), &across)?;
    s.csv("updates.csv", &[note], &parts)
}

fn cmd_trajectory(
    s: &mut Sink,
    ck: &Checkpoint,
    prompt: &[usize],
    layer: usize,
    profile: DetectionProfile,
) -> Result<()> {
    let snaps = norm_trajectory(&ck.model, prompt, layer, &profile)?;
    let ids = ck.model.prepare(prompt)?;
    for snap in &snaps {
        let name = match snap.head {
            Some(h) => format!("trajectory_{}_h{h}.csv", snap.stage.name()),
            None => format!("trajectory_{}.csv", snap.stage.name()),
        };
        let mut csv = Csv::new();
        let mut header = vec!["position".to_string(), "token".into(), "highlighted".into()];
        header.extend((0..snap.state.cols()).map(|f| format!("f{f}")));
        csv.header(&header);
        for (t, &id) in ids.iter().enumerate() {
            let mut row = vec![
                t.to_string(),
                label(ck, id),
                u8::from(snap.highlighted.contains(&t)).to_string(),
            ];
            row.extend(snap.state.row(t).iter().map(|&x| fmt_num(x)));
            csv.row(&row);
        }
        s.csv(&name, &[format!("block={layer} stage={}", snap.stage.name())], &csv)?;
    }
    Ok(())
}
