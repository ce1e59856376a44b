// SPDX-License-Identifier: MIT OR Apache-2.0

//! Character-level language-model training.
//!
//! Windows of `seq_len + 1` tokens are drawn uniformly from the training
//! split. The model sees the first `seq_len` (after the sink, when enabled)
//! and predicts the next token at every position. The sink position is
//! excluded from the loss.

mod corpus;

pub use corpus::{ingest_text, Corpus, Vocab};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{param_specs, Checkpoint, Model, ModelConfig, OptimizerSnapshot};
use crate::rng::{self, LabRng};
use crate::tensor::{clip_grad_norm, AdamState, AdamW, AdamWConfig, Tensor};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `vocab_size == 0` means "take it from the corpus".
    pub model: ModelConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Raw tokens per training example, excluding the sink.
    pub seq_len: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub eval_interval: usize,
    pub eval_windows: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub adam: AdamWConfig,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 0,
                ..ModelConfig::default()
            },
            iterations: 2000,
            batch_size: 16,
            seq_len: 255,
            lr: 1e-3,
            min_lr: 1e-4,
            warmup: 100,
            eval_interval: 100,
            eval_windows: 16,
            seed: 0,
            grad_clip: 1.0,
            adam: AdamWConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LabError::Config(m));
        if self.iterations < 1 {
            return fail("iterations must be >= 1".into());
        }
        if self.batch_size < 1 || self.seq_len < 1 || self.eval_windows < 1 {
            return fail("batch_size, seq_len and eval_windows must be >= 1".into());
        }
        if self.eval_interval < 1 {
            return fail("eval_interval must be >= 1".into());
        }
        if self.seq_len > self.model.max_tokens() {
            return fail(format!(
                "seq_len {} exceeds the {} tokens the context holds",
                self.seq_len,
                self.model.max_tokens()
            ));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return fail("need 0 <= min_lr <= lr".into());
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be > 0".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Fills an unset vocabulary size from `corpus` and checks the fit.
    pub fn resolve(mut self, corpus: &Corpus) -> Result<Self> {
        if self.model.vocab_size == 0 {
            self.model.vocab_size = corpus.vocab.len().max(2);
        }
        if corpus.vocab.len() > self.model.vocab_size {
            return Err(LabError::Config(format!(
                "corpus has {} symbols but the model vocabulary holds {}",
                corpus.vocab.len(),
                self.model.vocab_size
            )));
        }
        self.model.validate()?;
        self.validate()?;
        Ok(self)
    }

    /// Learning rate at `step` (0-based): linear warmup from 0, then cosine
    /// decay reaching `min_lr` at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        let last = self.iterations.saturating_sub(1);
        if last <= self.warmup {
            return if step >= last { self.min_lr } else { self.lr };
        }
        let progress = ((step - self.warmup) as f64 / (last - self.warmup) as f64).min(1.0);
        let cos = 1.0 + (std::f64::consts::PI * progress).cos();
        self.min_lr + 0.5 * (self.lr - self.min_lr) * cos
    }
}

/// Model inputs, next-token targets and loss mask for one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    /// `true` excludes the position from the loss (the sink slot).
    pub mask: Vec<bool>,
}

/// Builds the language-modelling example for a window of `n + 1` tokens.
pub fn lm_example(config: &ModelConfig, window: &[usize]) -> Result<Example> {
    if window.len() < 2 {
        return Err(LabError::InvalidArgument("a window needs at least two tokens".into()));
    }
    let n = window.len() - 1;
    let p = config.prefix_len();
    let mut ids = Vec::with_capacity(n + p);
    ids.extend(config.sink_id());
    ids.extend_from_slice(&window[..n]);
    let mut targets = Vec::with_capacity(n + p);
    let mut mask = Vec::with_capacity(n + p);
    if p == 1 {
        targets.push(window[0]);
        mask.push(true);
    }
    targets.extend_from_slice(&window[1..]);
    mask.extend(std::iter::repeat_n(false, n));
    Ok(Example { ids, targets, mask })
}

/// Fixed evaluation windows over `split`, drawn from the config seed.
pub fn eval_windows(split: &[usize], config: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    if split.len() < 2 {
        return Err(LabError::InvalidArgument("split needs at least two tokens".into()));
    }
    let len = (config.seq_len + 1).min(split.len());
    let mut rng = rng::derived(config.seed, EVAL_STREAM);
    Ok((0..config.eval_windows)
        .map(|_| {
            let start = rng.random_range(0..=split.len() - len);
            split[start..start + len].to_vec()
        })
        .collect())
}

/// `x[0] + mean(x - x[0])`: exact when all values agree.
pub fn shifted_mean(xs: &[f64]) -> f64 {
    let Some(&r) = xs.first() else { return f64::NAN };
    r + xs.iter().map(|x| x - r).sum::<f64>() / xs.len() as f64
}

/// Per-position negative log-likelihoods of unmasked rows.
pub fn token_nlls(logits: &Tensor, ex: &Example) -> Vec<f64> {
    (0..logits.rows())
        .filter(|&r| !ex.mask[r])
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            m + s.ln() - row[ex.targets[r]]
        })
        .collect()
}

/// Mean next-token cross entropy over the fixed windows of `split`.
pub fn eval_loss(model: &Model, split: &[usize], config: &TrainConfig) -> Result<f64> {
    let windows = eval_windows(split, config)?;
    let mut nlls = Vec::new();
    for chunk in windows.chunks(config.batch_size.max(1)) {
        let examples = chunk
            .iter()
            .map(|w| lm_example(&model.config, w))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<Vec<usize>> = examples.iter().map(|e| e.ids.clone()).collect();
        let pass = model.forward(&ids, &[], false)?;
        for (s, ex) in examples.iter().enumerate() {
            nlls.extend(token_nlls(&pass.rows_of(pass.logits, s), ex));
        }
    }
    Ok(shifted_mean(&nlls))
}

/// One row of the loss history. `val_loss` is NaN between evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Loss history as `step,train_loss,val_loss,lr` CSV rows.
pub fn history_csv(history: &[LossRecord]) -> crate::report::Csv {
    use crate::report::fmt_num;
    let mut csv = crate::report::Csv::new();
    csv.header(&["step", "train_loss", "val_loss", "lr"]);
    for r in history {
        csv.row(&[
            r.step.to_string(),
            fmt_num(r.train_loss),
            fmt_num(r.val_loss),
            fmt_num(r.lr),
        ]);
    }
    csv
}

/// Optimizer state plus the model being trained.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub corpus: Corpus,
    pub model: Model,
    pub history: Vec<LossRecord>,
    step: usize,
    adam: AdamW,
    states: BTreeMap<String, AdamState>,
    decays: BTreeMap<String, bool>,
    rng: LabRng,
}

impl Trainer {
    pub fn new(corpus: Corpus, config: TrainConfig) -> Result<Self> {
        let config = config.resolve(&corpus)?;
        if corpus.train_ids().len() < config.seq_len + 1 {
            return Err(LabError::Config(format!(
                "training split has {} tokens, fewer than one window of {}",
                corpus.train_ids().len(),
                config.seq_len + 1
            )));
        }
        let model = Model::init(config.model.clone(), config.seed)?;
        let specs = param_specs(&config.model);
        let states = specs.iter().map(|s| (s.name.clone(), AdamState::new(s.shape.iter().product()))).collect();
        let decays = specs.iter().map(|s| (s.name.clone(), s.decays())).collect();
        Ok(Self {
            adam: AdamW::new(config.adam),
            rng: rng::derived(config.seed, TRAIN_STREAM),
            config,
            corpus,
            model,
            history: Vec::new(),
            step: 0,
            states,
            decays,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn sample_batch(&mut self) -> Result<Vec<Example>> {
        let train = &self.corpus.ids[..self.corpus.split];
        let len = self.config.seq_len + 1;
        (0..self.config.batch_size)
            .map(|_| {
                let start = self.rng.random_range(0..=train.len() - len);
                lm_example(&self.model.config, &train[start..start + len])
            })
            .collect()
    }

    /// Runs one optimization step and returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.sample_batch()?;
        let ids: Vec<Vec<usize>> = batch.iter().map(|e| e.ids.clone()).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.targets.iter().copied()).collect();
        let mask: Vec<bool> = batch.iter().flat_map(|e| e.mask.iter().copied()).collect();

        let mut pass = self.model.forward(&ids, &[], true)?;
        let loss_var = pass.tape.cross_entropy(pass.logits, &targets, &mask)?;
        let loss = pass.tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(LabError::NonFiniteLoss {
                step: self.step,
                seed: self.config.seed,
            });
        }
        let mut grads = pass.tape.backward(loss_var)?;
        let mut named: Vec<(String, Vec<f64>)> = pass
            .params
            .named()
            .iter()
            .map(|(n, v)| {
                let g = grads.take(*v).unwrap_or_else(|| vec![0.0; pass.tape.value(*v).len()]);
                (n.clone(), g)
            })
            .collect();
        {
            let mut slices: Vec<&mut [f64]> = named.iter_mut().map(|(_, g)| g.as_mut_slice()).collect();
            clip_grad_norm(&mut slices, self.config.grad_clip);
        }
        let lr = self.config.lr_at(self.step);
        let t = self.step as u64 + 1;
        for (name, g) in &named {
            let param = self.model.params.get_mut(name).expect("bound from the same store");
            let state = self.states.get_mut(name).expect("state per parameter");
            self.adam.update(name, param.data_mut(), g, state, t, lr, self.decays[name])?;
        }
        let step = self.step;
        self.step += 1;

        let last = self.step == self.config.iterations;
        let val_loss = if step % self.config.eval_interval == 0 || last {
            eval_loss(&self.model, self.corpus.val_ids(), &self.config)?
        } else {
            f64::NAN
        };
        self.history.push(LossRecord {
            step,
            train_loss: loss,
            val_loss,
            lr,
        });
        Ok(loss)
    }

    /// Runs `n` further steps.
    pub fn run(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            self.train_step()?;
        }
        Ok(())
    }

    /// Validation loss of the current parameters.
    pub fn val_loss(&self) -> Result<f64> {
        eval_loss(&self.model, self.corpus.val_ids(), &self.config)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.model.clone(), self.config.seed);
        ck.step = self.step as u64;
        ck.vocab = Some(self.corpus.vocab.to_strings());
        ck.train_config = Some(serde_json::to_value(&self.config)?);
        ck.optimizer = Some(OptimizerSnapshot {
            step: self.step as u64,
            m: self.states.iter().map(|(n, s)| (n.clone(), s.m.clone())).collect(),
            v: self.states.iter().map(|(n, s)| (n.clone(), s.v.clone())).collect(),
        });
        Ok(ck)
    }
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    pub final_val_loss: f64,
}

/// Trains for `config.iterations` steps.
pub fn train(corpus: Corpus, config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, config)?;
    trainer.run(trainer.config.iterations)?;
    let final_val_loss = trainer
        .history
        .last()
        .map(|r| r.val_loss)
        .filter(|v| v.is_finite())
        .map_or_else(|| trainer.val_loss(), Ok)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint()?,
        history: trainer.history,
        final_val_loss,
    })
}
