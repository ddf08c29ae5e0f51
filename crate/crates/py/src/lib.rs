//! Python bindings: the toy model, the sparse autoencoder, steering-vector
//! construction, the evaluation metrics, and the file pipeline.
//!
//! Token sequences cross the boundary as `list[int]`, activation matrices
//! as `list[list[float]]`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use steerlab_core::corpus as core_corpus;
use steerlab_core::error::Error as CoreError;
use steerlab_core::eval as core_eval;
use steerlab_core::pipeline as core_pipeline;
use steerlab_core::sae as core_sae;
use steerlab_core::steering as core_steering;
use steerlab_core::tensor::Tensor;
use steerlab_core::toymodel as core_model;

fn err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn tensor_to_matrix(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().expect("2-D tensor");
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

fn corpus_from_items(items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>) -> core_corpus::BehaviorCorpus {
    core_corpus::BehaviorCorpus {
        behavior_name: "python".to_string(),
        items: items
            .into_iter()
            .map(|(question, pos, neg)| core_corpus::CorpusItem { question, pos, neg })
            .collect(),
    }
}

fn lexicon_from_sets(
    positive: Vec<u32>,
    negative: Vec<u32>,
) -> PyResult<core_eval::BehaviorLexicon> {
    core_eval::BehaviorLexicon::new(
        positive.into_iter().collect(),
        negative.into_iter().collect(),
    )
    .map_err(err)
}

// ---------------------------------------------------------------------------
// Steering vector
// ---------------------------------------------------------------------------

/// A model-space steering direction with provenance metadata.
#[pyclass(name = "SteeringVector")]
#[derive(Clone)]
struct PySteeringVector {
    inner: core_steering::SteeringVector,
}

#[pymethods]
impl PySteeringVector {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    #[getter]
    fn norm(&self) -> f64 {
        self.inner.norm
    }

    #[getter]
    fn layer(&self) -> usize {
        self.inner.layer
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn alpha(&self) -> Option<f64> {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> Option<f64> {
        self.inner.beta
    }

    #[getter]
    fn degenerate(&self) -> bool {
        self.inner.degenerate
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core_steering::SteeringVector::load(std::path::Path::new(path))
            .map(|inner| PySteeringVector { inner })
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SteeringVector(method={}, layer={}, dim={}, norm={:.4})",
            self.inner.method, self.inner.layer, self.inner.dim, self.inner.norm
        )
    }
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

/// Small decoder-only transformer with residual-stream access and an
/// additive steering hook.
#[pyclass(name = "ToyModel")]
struct PyToyModel {
    inner: core_model::ToyModel,
}

fn hook_from(vector: Option<&PySteeringVector>, multiplier: f64) -> Option<core_model::SteerHook> {
    vector.map(|v| v.inner.hook(multiplier))
}

#[pymethods]
impl PyToyModel {
    #[new]
    #[pyo3(signature = (vocab_size=64, d_model=64, n_layers=2, n_heads=2, max_seq=64, seed=0))]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_seq: usize,
        seed: u64,
    ) -> PyResult<Self> {
        core_model::ToyModel::init(core_model::ToyModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            max_seq,
            seed,
        })
        .map(|inner| PyToyModel { inner })
        .map_err(err)
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    /// Teacher-forced training; returns the per-step loss trajectory.
    fn train(&mut self, corpus: Vec<Vec<u32>>, steps: usize, lr: f64) -> PyResult<Vec<f64>> {
        core_model::train_toy(&mut self.inner, &corpus, steps, lr)
            .map(|report| report.losses)
            .map_err(err)
    }

    /// `[T, vocab]` logits.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let trace = self.inner.forward(&tokens).map_err(err)?;
        Ok(tensor_to_matrix(&trace.logits))
    }

    /// `[T, d_model]` post-block residual states at `layer`, optionally
    /// under a steering hook.
    #[pyo3(signature = (tokens, layer, vector=None, multiplier=1.0))]
    fn hidden(
        &self,
        tokens: Vec<u32>,
        layer: usize,
        vector: Option<&PySteeringVector>,
        multiplier: f64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let trace = match hook_from(vector, multiplier) {
            Some(hook) => self.inner.forward_steered(&tokens, &hook).map_err(err)?,
            None => self.inner.forward(&tokens).map_err(err)?,
        };
        let hidden = trace
            .hidden
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))?;
        Ok(tensor_to_matrix(hidden))
    }

    /// Mean attention mass on a key span, per layer.
    fn attention_to_span(&self, tokens: Vec<u32>, start: usize, end: usize) -> PyResult<Vec<f64>> {
        let trace = self.inner.forward(&tokens).map_err(err)?;
        core_model::attention_to_span(&trace, start..end).map_err(err)
    }

    #[pyo3(signature = (prompt, max_new, temperature=0.0, seed=0, vector=None, multiplier=1.0))]
    fn generate(
        &self,
        prompt: Vec<u32>,
        max_new: usize,
        temperature: f64,
        seed: u64,
        vector: Option<&PySteeringVector>,
        multiplier: f64,
    ) -> PyResult<Vec<u32>> {
        let hook = hook_from(vector, multiplier);
        self.inner
            .generate(&prompt, max_new, temperature, hook.as_ref(), seed)
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core_model::save_model(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core_model::load_model(std::path::Path::new(path))
            .map(|inner| PyToyModel { inner })
            .map_err(err)
    }

    /// Residual states at `layer` for every position of every sequence:
    /// `[sum(len), d_model]` — the SAE training dump.
    fn dump_activations(&self, sequences: Vec<Vec<u32>>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let rows =
            core_pipeline::dump_layer_activations(&self.inner, &sequences, layer).map_err(err)?;
        Ok(tensor_to_matrix(&rows))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "ToyModel(vocab={}, d_model={}, layers={}, heads={}, seed={})",
            c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.seed
        )
    }
}

// ---------------------------------------------------------------------------
// Sparse autoencoder
// ---------------------------------------------------------------------------

/// JumpReLU sparse autoencoder over residual-stream states.
#[pyclass(name = "Sae")]
struct PySae {
    inner: core_sae::SaeParams,
}

#[pymethods]
impl PySae {
    /// Train on `[N, D]` activations; returns (sae, report dict).
    #[staticmethod]
    #[pyo3(signature = (activations, m_latent=256, gamma=0.02, bandwidth=0.05, lr=0.01, steps=500, seed=0, batch_size=128, optimizer="adam"))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        activations: Vec<Vec<f64>>,
        m_latent: usize,
        gamma: f64,
        bandwidth: f64,
        lr: f64,
        steps: usize,
        seed: u64,
        batch_size: usize,
        optimizer: &str,
    ) -> PyResult<(Self, Py<pyo3::types::PyDict>)> {
        use pyo3::types::PyDict;
        let optimizer = match optimizer {
            "sgd" => core_sae::SaeOptimizer::Sgd,
            "adam" => core_sae::SaeOptimizer::Adam,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown optimizer '{other}' (sgd|adam)"
                )))
            }
        };
        let config = core_sae::SaeTrainConfig {
            m_latent,
            gamma,
            bandwidth,
            lr,
            steps,
            seed,
            batch_size,
            optimizer,
        };
        let rows = matrix_to_tensor(activations)?;
        let (params, report) = core_sae::train_sae(&rows, &config).map_err(err)?;
        let dict = PyDict::new(py);
        dict.set_item("losses", report.losses)?;
        dict.set_item("initial_recon", report.initial_recon)?;
        dict.set_item("final_recon", report.final_recon)?;
        dict.set_item("final_mean_l0", report.final_mean_l0)?;
        Ok((PySae { inner: params }, dict.into()))
    }

    #[getter]
    fn d_input(&self) -> usize {
        self.inner.d_input()
    }

    #[getter]
    fn m_latent(&self) -> usize {
        self.inner.m_latent()
    }

    /// Encode `[N, D]` (or a single `[D]` row) into atom activations.
    fn encode(&self, h: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let a = core_sae::encode(&self.inner, &matrix_to_tensor(h)?).map_err(err)?;
        Ok(tensor_to_matrix(&a))
    }

    fn decode(&self, a: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let h = core_sae::decode(&self.inner, &matrix_to_tensor(a)?).map_err(err)?;
        Ok(tensor_to_matrix(&h))
    }

    /// (total, reconstruction, sparsity) loss terms, per-example means.
    fn loss(&self, h: Vec<Vec<f64>>, gamma: f64) -> PyResult<(f64, f64, f64)> {
        let breakdown = core_sae::sae_loss(&self.inner, &matrix_to_tensor(h)?, gamma).map_err(err)?;
        Ok((breakdown.total, breakdown.recon, breakdown.sparsity))
    }

    fn mean_l0(&self, h: Vec<Vec<f64>>) -> PyResult<f64> {
        core_sae::mean_l0(&self.inner, &matrix_to_tensor(h)?).map_err(err)
    }

    fn save(&self, path: &str, gamma: f64, bandwidth: f64) -> PyResult<()> {
        core_sae::save_sae(&self.inner, gamma, bandwidth, std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core_sae::load_sae(std::path::Path::new(path))
            .map(|inner| PySae { inner })
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Sae(d_input={}, m_latent={})", self.inner.d_input(), self.inner.m_latent())
    }
}

/// Max relative error of the trainer's straight-through gradients against
/// central finite differences of the hard loss.
#[pyfunction]
#[pyo3(signature = (sae, h, gamma=0.05, bandwidth=0.05))]
fn gradient_check(sae: &PySae, h: Vec<Vec<f64>>, gamma: f64, bandwidth: f64) -> PyResult<f64> {
    let config = core_sae::SaeTrainConfig {
        m_latent: sae.inner.m_latent(),
        gamma,
        bandwidth,
        ..core_sae::SaeTrainConfig::default()
    };
    core_sae::gradient_check(&sae.inner, &matrix_to_tensor(h)?, &config).map_err(err)
}

// ---------------------------------------------------------------------------
// Corpus synthesis
// ---------------------------------------------------------------------------

/// Synthesize a two-behavior corpus. The non-reserved token range splits
/// into positive, negative, and question pools. Returns
/// `(items, positive_tokens, negative_tokens)` where each item is a
/// `(question, positive_answer, negative_answer)` token triple.
#[pyfunction]
#[pyo3(signature = (seed=0, n_items=64, vocab_size=64))]
fn generate_corpus(
    seed: u64,
    n_items: usize,
    vocab_size: usize,
) -> PyResult<(Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>, Vec<u32>, Vec<u32>)> {
    let reserved = core_model::RESERVED_TOKENS as u32;
    if (vocab_size as u32) < reserved + 6 {
        return Err(PyValueError::new_err(format!(
            "vocab_size {vocab_size} too small to partition into token pools"
        )));
    }
    let usable = vocab_size as u32 - reserved;
    let third = usable / 3;
    let spec = core_corpus::GrammarSpec {
        n_items,
        vocab_size,
        positive_tokens: (reserved..reserved + third).collect(),
        negative_tokens: (reserved + third..reserved + 2 * third).collect(),
        question_tokens: (reserved + 2 * third..vocab_size as u32).collect(),
        ..core_corpus::GrammarSpec::default()
    };
    let (corpus, lexicon) = core_corpus::generate_behavior_corpus(&spec, seed).map_err(err)?;
    let items = corpus
        .items
        .into_iter()
        .map(|i| (i.question, i.pos, i.neg))
        .collect();
    Ok((
        items,
        lexicon.positive_tokens.into_iter().collect(),
        lexicon.negative_tokens.into_iter().collect(),
    ))
}

/// Training sequences (`[BOS] question answer`) for a corpus.
#[pyfunction]
fn training_sequences(items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>) -> Vec<Vec<u32>> {
    corpus_from_items(items).training_sequences()
}

// ---------------------------------------------------------------------------
// Steering-vector construction
// ---------------------------------------------------------------------------

#[pyfunction]
fn caa_vector(
    model: &PyToyModel,
    items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>,
    layer: usize,
) -> PyResult<PySteeringVector> {
    core_steering::caa_vector(&model.inner, &corpus_from_items(items), layer)
        .map(|inner| PySteeringVector { inner })
        .map_err(err)
}

/// Target-atom vector: contrast stats, rank thresholds at `top_fraction`,
/// selection (mode: full | wo_amplitude | wo_frequency), decode.
#[pyfunction]
#[pyo3(signature = (model, sae, items, layer, top_fraction=0.35, include_decoder_bias=true, mode="full"))]
fn sta_vector(
    model: &PyToyModel,
    sae: &PySae,
    items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>,
    layer: usize,
    top_fraction: f64,
    include_decoder_bias: bool,
    mode: &str,
) -> PyResult<PySteeringVector> {
    let mode = match mode {
        "full" => core_steering::SelectionMode::Full,
        "wo_amplitude" => core_steering::SelectionMode::WoAmplitude,
        "wo_frequency" => core_steering::SelectionMode::WoFrequency,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown mode '{other}' (full|wo_amplitude|wo_frequency)"
            )))
        }
    };
    let corpus = corpus_from_items(items);
    let stats =
        core_steering::collect_atom_stats(&model.inner, &sae.inner, &corpus, layer).map_err(err)?;
    let thresholds = core_steering::thresholds_from_fraction(&stats, top_fraction).map_err(err)?;
    core_steering::build_sta_vector(
        &stats,
        &sae.inner,
        &thresholds,
        mode,
        include_decoder_bias,
        &corpus.content_hash(),
    )
    .map(|inner| PySteeringVector { inner })
    .map_err(err)
}

/// The all-atoms baseline (pass-all selection through the same path).
#[pyfunction]
#[pyo3(signature = (model, sae, items, layer, include_decoder_bias=true))]
fn axbench_vector(
    model: &PyToyModel,
    sae: &PySae,
    items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>,
    layer: usize,
    include_decoder_bias: bool,
) -> PyResult<PySteeringVector> {
    let corpus = corpus_from_items(items);
    let stats =
        core_steering::collect_atom_stats(&model.inner, &sae.inner, &corpus, layer).map_err(err)?;
    core_steering::axbench_vector(
        &stats,
        &sae.inner,
        include_decoder_bias,
        &corpus.content_hash(),
    )
    .map(|inner| PySteeringVector { inner })
    .map_err(err)
}

/// Convert a prompt into a steering vector: `[BOS] prompt SPACE` against
/// `[BOS] SPACE`, read at the space token.
#[pyfunction]
#[pyo3(signature = (model, prompt, layer, method="caa", sae=None, top_fraction=0.35, include_decoder_bias=true))]
#[allow(clippy::too_many_arguments)]
fn prompt_to_vector(
    model: &PyToyModel,
    prompt: Vec<u32>,
    layer: usize,
    method: &str,
    sae: Option<&PySae>,
    top_fraction: f64,
    include_decoder_bias: bool,
) -> PyResult<PySteeringVector> {
    let method = match method {
        "caa" => core_steering::PromptMethod::Caa,
        "sta" => core_steering::PromptMethod::Sta,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method '{other}' (caa|sta)"
            )))
        }
    };
    core_steering::prompt_to_vector(
        &model.inner,
        &prompt,
        method,
        sae.map(|s| &s.inner),
        layer,
        core_steering::PromptStaOptions {
            top_fraction,
            include_decoder_bias,
        },
    )
    .map(|inner| PySteeringVector { inner })
    .map_err(err)
}

/// Rescale `v` to the reference norm, keeping its direction.
#[pyfunction]
fn match_magnitude(
    v: &PySteeringVector,
    reference: &PySteeringVector,
) -> PyResult<PySteeringVector> {
    core_steering::match_magnitude(&v.inner, &reference.inner)
        .map(|inner| PySteeringVector { inner })
        .map_err(err)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Positive-lexicon probability mass of the next-token distribution,
/// renormalized over both lexicons and averaged across prompts.
#[pyfunction]
#[pyo3(signature = (model, prompts, positive_tokens, negative_tokens, vector=None, multiplier=1.0))]
fn behavior_score(
    model: &PyToyModel,
    prompts: Vec<Vec<u32>>,
    positive_tokens: Vec<u32>,
    negative_tokens: Vec<u32>,
    vector: Option<&PySteeringVector>,
    multiplier: f64,
) -> PyResult<f64> {
    let lexicon = lexicon_from_sets(positive_tokens, negative_tokens)?;
    let hook = hook_from(vector, multiplier);
    core_eval::behavior_score(&model.inner, &prompts, hook.as_ref(), &lexicon).map_err(err)
}

/// Distinct-n ratio of a token sequence.
#[pyfunction]
#[pyo3(signature = (sequence, n=2))]
fn fluency_ngram(sequence: Vec<u32>, n: usize) -> PyResult<f64> {
    core_eval::fluency_ngram(&sequence, n).map_err(err)
}

/// Top-k `(token, probability)` of the next-token distribution.
#[pyfunction]
#[pyo3(signature = (model, prompt, k=5, vector=None, multiplier=1.0))]
fn topk_distribution(
    model: &PyToyModel,
    prompt: Vec<u32>,
    k: usize,
    vector: Option<&PySteeringVector>,
    multiplier: f64,
) -> PyResult<Vec<(u32, f64)>> {
    let hook = hook_from(vector, multiplier);
    core_eval::topk_distribution(&model.inner, &prompt, hook.as_ref(), k).map_err(err)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Run the full resumable pipeline from a TOML config string; returns a
/// list of `(stage, skipped)` pairs. Artifacts land in `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=""))]
fn run_pipeline(out_dir: &str, config_toml: &str) -> PyResult<Vec<(String, bool)>> {
    let config: core_pipeline::RunConfig = if config_toml.trim().is_empty() {
        core_pipeline::RunConfig::default()
    } else {
        toml::from_str(config_toml)
            .map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?
    };
    let outcome =
        core_pipeline::run_pipeline(&config, std::path::Path::new(out_dir)).map_err(err)?;
    Ok(outcome
        .stages
        .into_iter()
        .map(|s| (s.name.to_string(), s.skipped))
        .collect())
}

#[pymodule]
fn steerlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyModel>()?;
    m.add_class::<PySae>()?;
    m.add_class::<PySteeringVector>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(training_sequences, m)?)?;
    m.add_function(wrap_pyfunction!(caa_vector, m)?)?;
    m.add_function(wrap_pyfunction!(sta_vector, m)?)?;
    m.add_function(wrap_pyfunction!(axbench_vector, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_to_vector, m)?)?;
    m.add_function(wrap_pyfunction!(match_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(behavior_score, m)?)?;
    m.add_function(wrap_pyfunction!(fluency_ngram, m)?)?;
    m.add_function(wrap_pyfunction!(topk_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("BOS_TOKEN", core_model::BOS_TOKEN)?;
    m.add("EOS_TOKEN", core_model::EOS_TOKEN)?;
    m.add("SPACE_TOKEN", core_model::SPACE_TOKEN)?;
    m.add("PAD_TOKEN", core_model::PAD_TOKEN)?;
    Ok(())
}
