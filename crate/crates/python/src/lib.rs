// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: models, traces, detection, interventions and training.
//! Tensors cross the boundary as nested lists of floats.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use actlab::attention::{AttentionVariant, AttentionVariantParams};
use actlab::instrumentation::{detect_massive, layer_stats, DetectionProfile};
use actlab::intervention::{calibrate_means, perplexity, run_with_intervention, InterventionMode, InterventionSpec};
use actlab::model::{Checkpoint, ModelConfig};
use actlab::trainer::{Corpus, TrainConfig, Vocab};
use actlab::{LabError, Tensor};

fn err(e: LabError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn tensor(m: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(m).map_err(err)
}

fn model_config(json: Option<&str>) -> PyResult<ModelConfig> {
    match json {
        Some(j) => serde_json::from_str(j).map_err(json_err),
        None => Ok(ModelConfig::default()),
    }
}

/// A transformer checkpoint: parameters, config and optional vocabulary.
#[pyclass(name = "Model", module = "actlab_py")]
struct Model {
    ck: Checkpoint,
}

impl Model {
    fn spec(&self, json: &str) -> PyResult<InterventionSpec> {
        let spec = InterventionSpec::from_json(json).map_err(err)?;
        spec.validate(&self.ck.model).map_err(err)?;
        Ok(spec)
    }
}

#[pymethods]
impl Model {
    /// Random init from a JSON model config (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let model = actlab::model::Model::init(model_config(config_json)?, seed).map_err(err)?;
        Ok(Self {
            ck: Checkpoint::new(model, seed),
        })
    }

    /// Every parameter, gains included, set to zero.
    #[staticmethod]
    #[pyo3(signature = (config_json = None))]
    fn zeroed(config_json: Option<&str>) -> PyResult<Self> {
        let model = actlab::model::Model::zeroed(model_config(config_json)?).map_err(err)?;
        Ok(Self {
            ck: Checkpoint::new(model, 0),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            ck: Checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ck.save(path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.ck.model.config).map_err(json_err)
    }

    #[getter]
    fn vocab(&self) -> Option<Vec<String>> {
        self.ck.vocab.clone()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<usize>> {
        let v = self
            .ck
            .vocab
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no vocabulary"))?;
        Vocab::from_strings(v).and_then(|v| v.encode(text)).map_err(err)
    }

    /// Next-token logits, one row per position (the sink row included).
    fn forward(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.ck.model.forward_with_trace(&tokens).map_err(err)?;
        Ok(rows(&out.logits))
    }

    /// Residual states 0..=L, each `[T][d]`.
    fn trace(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let out = self.ck.model.forward_with_trace(&tokens).map_err(err)?;
        Ok(out.trace.states.iter().map(rows).collect())
    }

    /// Attention probabilities of one block, `[head][query][key]`; a
    /// trailing column holds the bias slot when the variant has one.
    fn attention(&self, tokens: Vec<usize>, layer: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let out = self.ck.model.forward_with_trace(&tokens).map_err(err)?;
        let a = out
            .attention
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("no block {layer}")))?;
        Ok((0..a.heads()).map(|h| rows(&a.head(h))).collect())
    }

    /// Massive activations as `(layer, token, feature, value, ratio)`.
    #[pyo3(signature = (tokens, abs_threshold = 100.0, ratio_threshold = 1000.0))]
    fn detect_massive(
        &self,
        tokens: Vec<usize>,
        abs_threshold: f64,
        ratio_threshold: f64,
    ) -> PyResult<Vec<(usize, usize, usize, f64, f64)>> {
        let out = self.ck.model.forward_with_trace(&tokens).map_err(err)?;
        let profile = DetectionProfile {
            abs_threshold,
            ratio_threshold,
        };
        Ok(detect_massive(&out.trace, &profile)
            .map_err(err)?
            .into_iter()
            .map(|r| (r.layer, r.token_index, r.feature_index, r.value, r.ratio))
            .collect())
    }

    /// Per-state top-k magnitudes and median magnitude.
    #[pyo3(signature = (tokens, k = 3))]
    fn layer_stats(&self, tokens: Vec<usize>, k: usize) -> PyResult<Vec<(Vec<f64>, f64)>> {
        let out = self.ck.model.forward_with_trace(&tokens).map_err(err)?;
        Ok(layer_stats(&out.trace, k)
            .map_err(err)?
            .into_iter()
            .map(|s| (s.top.iter().map(|e| e.magnitude).collect(), s.median_magnitude))
            .collect())
    }

    /// Logits with an intervention spec (JSON) applied. Mode `mean`
    /// calibrates on the given sequence itself.
    fn intervene(&self, tokens: Vec<usize>, spec_json: &str) -> PyResult<Vec<Vec<f64>>> {
        let spec = self.spec(spec_json)?;
        let calib = match spec.mode {
            InterventionMode::Mean => {
                Some(calibrate_means(&self.ck.model, std::slice::from_ref(&tokens), &spec, 0).map_err(err)?)
            }
            _ => None,
        };
        let out = run_with_intervention(&self.ck.model, &tokens, &spec, calib.as_ref()).map_err(err)?;
        Ok(rows(&out.logits))
    }

    /// Perplexity over windows, optionally under an intervention. Mode
    /// `mean` calibrates on the window inputs.
    #[pyo3(signature = (windows, spec_json = None))]
    fn perplexity(&self, windows: Vec<Vec<usize>>, spec_json: Option<&str>) -> PyResult<f64> {
        let m = &self.ck.model;
        match spec_json {
            None => perplexity(m, &windows, None).map_err(err),
            Some(j) => {
                let spec = self.spec(j)?;
                let calib = match spec.mode {
                    InterventionMode::Mean => {
                        let inputs: Vec<Vec<usize>> =
                            windows.iter().map(|w| w[..w.len().saturating_sub(1)].to_vec()).collect();
                        Some(calibrate_means(m, &inputs, &spec, 0).map_err(err)?)
                    }
                    _ => None,
                };
                perplexity(m, &windows, Some((&spec, calib.as_ref()))).map_err(err)
            }
        }
    }

    fn __repr__(&self) -> String {
        let c = &self.ck.model.config;
        format!(
            "Model(layers={}, d_model={}, heads={}, variant={}, sink={})",
            c.n_layers, c.d_model, c.n_heads, c.variant, c.sink_token
        )
    }
}

/// Trains on `text` with a JSON training config. Returns the model and the
/// loss history as `(step, train_loss, val_loss, lr)`; `val_loss` is NaN
/// between evaluations.
#[pyfunction]
#[pyo3(signature = (text, config_json = None))]
fn train(py: Python<'_>, text: &str, config_json: Option<&str>) -> PyResult<(Model, Vec<(usize, f64, f64, f64)>)> {
    let config: TrainConfig = match config_json {
        Some(j) => serde_json::from_str(j).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    let corpus = Corpus::from_text(text, config.val_fraction).map_err(err)?;
    let out = py
        .detach(|| actlab::trainer::train(corpus, config))
        .map_err(err)?;
    let history = out
        .history
        .iter()
        .map(|r| (r.step, r.train_loss, r.val_loss, r.lr))
        .collect();
    Ok((Model { ck: out.checkpoint }, history))
}

/// One causal attention head on plain matrices. Returns the `[T][d_head]`
/// output and the `[T][cols]` probabilities.
#[pyfunction]
#[pyo3(signature = (q, k, v, variant = "standard", k_bias = None, v_bias = None, q_col = None, k_col = None))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn causal_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    variant: &str,
    k_bias: Option<Vec<f64>>,
    v_bias: Option<Vec<f64>>,
    q_col: Option<Vec<f64>>,
    k_col: Option<Vec<f64>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let params = AttentionVariantParams {
        variant: variant.parse::<AttentionVariant>().map_err(err)?,
        k_bias,
        v_bias,
        q_col,
        k_col,
    };
    let (out, probs) =
        actlab::attention::causal_attention(&tensor(&q)?, &tensor(&k)?, &tensor(&v)?, &params).map_err(err)?;
    Ok((rows(&out), rows(&probs.head(0))))
}

#[pymodule]
fn actlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(causal_attention, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
