//! Steering-vector construction.
//!
//! Three routes into the same vector type: CAA (mean difference of raw
//! residual states), the all-atoms SAE baseline, and target-atom steering
//! (decode only the atoms passing amplitude and frequency contrast filters).
//! Prompts convert to vectors by contrasting `prompt + space` against a bare
//! space at the space token.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::BehaviorCorpus;
use crate::error::{Error, Result};
use crate::sae::{decode, encode, SaeParams};
use crate::tensor::{rank_threshold, Tensor};
use crate::toymodel::{ToyModel, BOS_TOKEN, SPACE_TOKEN};

pub const VECTOR_FORMAT_VERSION: u32 = 1;

/// Per-atom contrast statistics over a behavior corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomStats {
    /// Mean difference of per-example mean activations (positive - negative).
    pub delta_a: Tensor,
    /// Fraction of examples on which each atom fires for the positive answer.
    pub f_pos: Tensor,
    pub f_neg: Tensor,
    /// `f_pos - f_neg`.
    pub delta_f: Tensor,
    pub n_examples: usize,
    pub layer: usize,
}

/// Amplitude/frequency cutoffs for target-atom selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub alpha: f64,
    pub beta: f64,
    /// The rank fraction the cutoffs were derived from, when they were.
    pub top_fraction: Option<f64>,
}

impl SelectionThresholds {
    /// Thresholds that admit every atom (the all-atoms baseline).
    pub fn pass_all() -> Self {
        SelectionThresholds {
            alpha: f64::NEG_INFINITY,
            beta: f64::NEG_INFINITY,
            top_fraction: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SteerMethod {
    #[serde(rename = "CAA")]
    Caa,
    #[serde(rename = "STA")]
    Sta,
    #[serde(rename = "SAE_AXBENCH")]
    SaeAxbench,
    #[serde(rename = "PROMPT_CAA")]
    PromptCaa,
    #[serde(rename = "PROMPT_STA")]
    PromptSta,
}

impl std::fmt::Display for SteerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SteerMethod::Caa => "CAA",
            SteerMethod::Sta => "STA",
            SteerMethod::SaeAxbench => "SAE_AXBENCH",
            SteerMethod::PromptCaa => "PROMPT_CAA",
            SteerMethod::PromptSta => "PROMPT_STA",
        };
        f.write_str(s)
    }
}

/// Ablation modes for the selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Amplitude and frequency conditions both apply.
    Full,
    /// Drop the amplitude condition.
    WoAmplitude,
    /// Drop the frequency condition.
    WoFrequency,
}

/// A model-space steering direction with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub version: u32,
    pub method: SteerMethod,
    pub layer: usize,
    pub dim: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub top_fraction: Option<f64>,
    pub include_decoder_bias: Option<bool>,
    /// L2 norm of `values`.
    pub norm: f64,
    pub values: Vec<f64>,
    pub source_hash: String,
    /// Set when the construction contrasted identical inputs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl SteeringVector {
    fn new(
        values: Vec<f64>,
        method: SteerMethod,
        layer: usize,
        source_hash: String,
    ) -> SteeringVector {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        SteeringVector {
            version: VECTOR_FORMAT_VERSION,
            method,
            layer,
            dim: values.len(),
            alpha: None,
            beta: None,
            top_fraction: None,
            include_decoder_bias: None,
            norm,
            values,
            source_hash,
            degenerate: false,
        }
    }

    pub fn values_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone())
    }

    /// Hook applying this vector at its layer with multiplier `lambda`.
    pub fn hook(&self, lambda: f64) -> crate::toymodel::SteerHook {
        crate::toymodel::SteerHook {
            layer: self.layer,
            vector: self.values_tensor(),
            multiplier: lambda,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SteeringVector> {
        let v: SteeringVector = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if v.version != VECTOR_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: vector format version {} unsupported (expected {VECTOR_FORMAT_VERSION}); \
                 rebuild the vector with this build",
                path.display(),
                v.version
            )));
        }
        if v.dim != v.values.len() {
            return Err(Error::Format(format!(
                "{}: dim field {} disagrees with {} stored values",
                path.display(),
                v.dim,
                v.values.len()
            )));
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Residual-state collection
// ---------------------------------------------------------------------------

/// Mean residual state over the answer span of `[BOS] question answer`,
/// read post-block at `layer`.
fn mean_answer_state(
    model: &ToyModel,
    question: &[u32],
    answer: &[u32],
    layer: usize,
) -> Result<Tensor> {
    if answer.is_empty() {
        return Err(Error::Input("empty answer span".to_string()));
    }
    let mut tokens = Vec::with_capacity(1 + question.len() + answer.len());
    tokens.push(BOS_TOKEN);
    tokens.extend_from_slice(question);
    tokens.extend_from_slice(answer);
    let trace = model.forward(&tokens)?;
    if layer >= trace.hidden.len() {
        return Err(Error::Config(format!(
            "layer {layer} out of range for model with {} layers",
            trace.hidden.len()
        )));
    }
    let hidden = &trace.hidden[layer];
    let d = hidden.shape()[1];
    let start = 1 + question.len();
    let mut mean = vec![0.0; d];
    for t in start..tokens.len() {
        let row = hidden.row(t);
        for i in 0..d {
            mean[i] += row[i];
        }
    }
    let count = answer.len() as f64;
    for v in &mut mean {
        *v /= count;
    }
    Ok(Tensor::from_vec(mean))
}

/// Contrast statistics from per-example mean activations (already encoded).
/// Exposed separately so the aggregation arithmetic is testable directly.
pub fn atom_stats_from_encoded(pairs: &[(Tensor, Tensor)], layer: usize) -> Result<AtomStats> {
    if pairs.is_empty() {
        return Err(Error::Input("no (positive, negative) pairs".to_string()));
    }
    let m = pairs[0].0.len();
    let n = pairs.len() as f64;
    let mut delta_a = vec![0.0; m];
    let mut f_pos = vec![0.0; m];
    let mut f_neg = vec![0.0; m];
    for (a_pos, a_neg) in pairs {
        if a_pos.len() != m || a_neg.len() != m {
            return Err(Error::Dimension(format!(
                "activation length mismatch: expected {m}, got {} and {}",
                a_pos.len(),
                a_neg.len()
            )));
        }
        for j in 0..m {
            delta_a[j] += a_pos.data()[j] - a_neg.data()[j];
            if a_pos.data()[j].abs() > 0.0 {
                f_pos[j] += 1.0;
            }
            if a_neg.data()[j].abs() > 0.0 {
                f_neg[j] += 1.0;
            }
        }
    }
    for j in 0..m {
        delta_a[j] /= n;
        f_pos[j] /= n;
        f_neg[j] /= n;
    }
    let delta_f: Vec<f64> = f_pos.iter().zip(&f_neg).map(|(p, q)| p - q).collect();
    Ok(AtomStats {
        delta_a: Tensor::from_vec(delta_a),
        f_pos: Tensor::from_vec(f_pos),
        f_neg: Tensor::from_vec(f_neg),
        delta_f: Tensor::from_vec(delta_f),
        n_examples: pairs.len(),
        layer,
    })
}

/// Run the corpus through the model, encode the answer-token residual
/// states, and aggregate amplitude and frequency contrasts per atom.
pub fn collect_atom_stats(
    model: &ToyModel,
    sae: &SaeParams,
    corpus: &BehaviorCorpus,
    layer: usize,
) -> Result<AtomStats> {
    corpus.validate(model.config.max_seq)?;
    if sae.d_input() != model.config.d_model {
        return Err(Error::Config(format!(
            "SAE input dim {} vs model d_model {}",
            sae.d_input(),
            model.config.d_model
        )));
    }
    let mut pairs = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let a_pos = encode_answer_mean(model, sae, &item.question, &item.pos, layer)?;
        let a_neg = encode_answer_mean(model, sae, &item.question, &item.neg, layer)?;
        pairs.push((a_pos, a_neg));
    }
    atom_stats_from_encoded(&pairs, layer)
}

/// Mean of per-token encoded activations over the answer span.
fn encode_answer_mean(
    model: &ToyModel,
    sae: &SaeParams,
    question: &[u32],
    answer: &[u32],
    layer: usize,
) -> Result<Tensor> {
    if answer.is_empty() {
        return Err(Error::Input("empty answer span".to_string()));
    }
    let mut tokens = Vec::with_capacity(1 + question.len() + answer.len());
    tokens.push(BOS_TOKEN);
    tokens.extend_from_slice(question);
    tokens.extend_from_slice(answer);
    let trace = model.forward(&tokens)?;
    if layer >= trace.hidden.len() {
        return Err(Error::Config(format!(
            "layer {layer} out of range for model with {} layers",
            trace.hidden.len()
        )));
    }
    let hidden = &trace.hidden[layer];
    let start = 1 + question.len();
    let m = sae.m_latent();
    let mut mean = vec![0.0; m];
    for t in start..tokens.len() {
        let a = encode(sae, &Tensor::from_vec(hidden.row(t).to_vec()))?;
        for j in 0..m {
            mean[j] += a.data()[j];
        }
    }
    let count = answer.len() as f64;
    for v in &mut mean {
        *v /= count;
    }
    Ok(Tensor::from_vec(mean))
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Alpha/beta as the values at the top `fraction` rank of the contrast
/// statistics.
pub fn thresholds_from_fraction(
    stats: &AtomStats,
    top_fraction: f64,
) -> Result<SelectionThresholds> {
    let alpha = rank_threshold(&stats.delta_a, top_fraction)?;
    let beta = rank_threshold(&stats.delta_f, top_fraction)?;
    Ok(SelectionThresholds {
        alpha,
        beta,
        top_fraction: Some(top_fraction),
    })
}

/// Target atoms: `delta_a_j` where the amplitude condition
/// (`delta_a_j >= alpha`) and frequency condition (`delta_f_j >= beta`)
/// hold, zero elsewhere. Ablation modes drop one condition.
pub fn select_target_atoms(
    stats: &AtomStats,
    thresholds: &SelectionThresholds,
    mode: SelectionMode,
) -> Result<Tensor> {
    let m = stats.delta_a.len();
    if stats.delta_f.len() != m {
        return Err(Error::Dimension(format!(
            "delta_a has {m} atoms but delta_f has {}",
            stats.delta_f.len()
        )));
    }
    let mut out = vec![0.0; m];
    for j in 0..m {
        let amplitude_ok = stats.delta_a.data()[j] >= thresholds.alpha;
        let frequency_ok = stats.delta_f.data()[j] >= thresholds.beta;
        let selected = match mode {
            SelectionMode::Full => amplitude_ok && frequency_ok,
            SelectionMode::WoAmplitude => frequency_ok,
            SelectionMode::WoFrequency => amplitude_ok,
        };
        if selected {
            out[j] = stats.delta_a.data()[j];
        }
    }
    Ok(Tensor::from_vec(out))
}

// ---------------------------------------------------------------------------
// Vector construction
// ---------------------------------------------------------------------------

/// Decode target atoms back to model space:
/// `v = a_target W_dec (+ b_dec when the flag is on)`.
pub fn sta_vector(
    a_target: &Tensor,
    sae: &SaeParams,
    include_decoder_bias: bool,
    layer: usize,
    source_hash: &str,
) -> Result<SteeringVector> {
    let m = sae.m_latent();
    if a_target.shape() != [m] {
        return Err(Error::Dimension(format!(
            "a_target shape {:?} vs SAE latent size {m}",
            a_target.shape()
        )));
    }
    let d = sae.d_input();
    let mut values = vec![0.0; d];
    if include_decoder_bias {
        values.copy_from_slice(sae.b_dec.data());
    }
    for j in 0..m {
        let a = a_target.data()[j];
        if a == 0.0 {
            continue;
        }
        let row = &sae.w_dec.data()[j * d..(j + 1) * d];
        for (v, &w) in values.iter_mut().zip(row) {
            *v += a * w;
        }
    }
    let mut vector = SteeringVector::new(values, SteerMethod::Sta, layer, source_hash.to_string());
    vector.include_decoder_bias = Some(include_decoder_bias);
    Ok(vector)
}

/// Full target-atom route: stats -> thresholds -> selection -> decode.
pub fn build_sta_vector(
    stats: &AtomStats,
    sae: &SaeParams,
    thresholds: &SelectionThresholds,
    mode: SelectionMode,
    include_decoder_bias: bool,
    source_hash: &str,
) -> Result<SteeringVector> {
    let a_target = select_target_atoms(stats, thresholds, mode)?;
    let mut vector = sta_vector(&a_target, sae, include_decoder_bias, stats.layer, source_hash)?;
    vector.alpha = Some(thresholds.alpha).filter(|a| a.is_finite());
    vector.beta = Some(thresholds.beta).filter(|b| b.is_finite());
    vector.top_fraction = thresholds.top_fraction;
    Ok(vector)
}

/// The all-atoms baseline: the target-atom route with pass-all thresholds.
/// Same code path, different label.
pub fn axbench_vector(
    stats: &AtomStats,
    sae: &SaeParams,
    include_decoder_bias: bool,
    source_hash: &str,
) -> Result<SteeringVector> {
    let mut vector = build_sta_vector(
        stats,
        sae,
        &SelectionThresholds::pass_all(),
        SelectionMode::Full,
        include_decoder_bias,
        source_hash,
    )?;
    vector.method = SteerMethod::SaeAxbench;
    Ok(vector)
}

/// CAA from raw per-example mean states: `mean_i(h_pos_i - h_neg_i)`.
/// Exposed separately so the arithmetic is testable directly.
pub fn caa_from_state_pairs(pairs: &[(Tensor, Tensor)], layer: usize) -> Result<SteeringVector> {
    if pairs.is_empty() {
        return Err(Error::Input(
            "no (positive, negative) state pairs".to_string(),
        ));
    }
    let d = pairs[0].0.len();
    let mut values = vec![0.0; d];
    for (h_pos, h_neg) in pairs {
        if h_pos.len() != d || h_neg.len() != d {
            return Err(Error::Dimension(format!(
                "state length mismatch: expected {d}, got {} and {}",
                h_pos.len(),
                h_neg.len()
            )));
        }
        for i in 0..d {
            values[i] += h_pos.data()[i] - h_neg.data()[i];
        }
    }
    let n = pairs.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    Ok(SteeringVector::new(
        values,
        SteerMethod::Caa,
        layer,
        String::new(),
    ))
}

/// Contrastive activation addition over a behavior corpus.
pub fn caa_vector(
    model: &ToyModel,
    corpus: &BehaviorCorpus,
    layer: usize,
) -> Result<SteeringVector> {
    corpus.validate(model.config.max_seq)?;
    if layer >= model.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for model with {} layers",
            model.config.n_layers
        )));
    }
    let mut pairs = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let h_pos = mean_answer_state(model, &item.question, &item.pos, layer)?;
        let h_neg = mean_answer_state(model, &item.question, &item.neg, layer)?;
        pairs.push((h_pos, h_neg));
    }
    let mut vector = caa_from_state_pairs(&pairs, layer)?;
    vector.source_hash = corpus.content_hash();
    Ok(vector)
}

/// Rescale `v` to the reference norm, keeping its direction.
pub fn match_magnitude(v: &SteeringVector, reference: &SteeringVector) -> Result<SteeringVector> {
    if reference.norm <= 0.0 {
        return Err(Error::Parameter(format!(
            "reference norm must be positive, got {}",
            reference.norm
        )));
    }
    if v.norm == 0.0 {
        return Err(Error::Degenerate(
            "cannot rescale a zero steering vector".to_string(),
        ));
    }
    let factor = reference.norm / v.norm;
    let values: Vec<f64> = v.values.iter().map(|x| x * factor).collect();
    let mut out = v.clone();
    out.norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    out.values = values;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prompt-to-vector
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMethod {
    Caa,
    Sta,
}

/// Options for the target-atom route of prompt conversion.
#[derive(Clone, Copy, Debug)]
pub struct PromptStaOptions {
    pub top_fraction: f64,
    pub include_decoder_bias: bool,
}

impl Default for PromptStaOptions {
    fn default() -> Self {
        PromptStaOptions {
            top_fraction: 0.35,
            include_decoder_bias: true,
        }
    }
}

/// Convert a prompt into a steering vector. Positive input is
/// `[BOS] prompt SPACE`, negative input is `[BOS] SPACE`; the residual
/// state is read at the final SPACE position of each. An empty prompt
/// contrasts identical inputs: the result is the zero vector, flagged
/// degenerate rather than an error.
pub fn prompt_to_vector(
    model: &ToyModel,
    prompt: &[u32],
    method: PromptMethod,
    sae: Option<&SaeParams>,
    layer: usize,
    sta_options: PromptStaOptions,
) -> Result<SteeringVector> {
    if layer >= model.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for model with {} layers",
            model.config.n_layers
        )));
    }
    let mut positive = Vec::with_capacity(prompt.len() + 2);
    positive.push(BOS_TOKEN);
    positive.extend_from_slice(prompt);
    positive.push(SPACE_TOKEN);
    let negative = vec![BOS_TOKEN, SPACE_TOKEN];

    let state_at_space = |tokens: &[u32]| -> Result<Tensor> {
        let trace = model.forward(tokens)?;
        let hidden = &trace.hidden[layer];
        Ok(Tensor::from_vec(hidden.row(tokens.len() - 1).to_vec()))
    };
    let h_pos = state_at_space(&positive)?;
    let h_neg = state_at_space(&negative)?;
    let source_hash = crate::pipeline::sha256_hex(
        prompt
            .iter()
            .flat_map(|t| t.to_le_bytes())
            .collect::<Vec<u8>>()
            .as_slice(),
    );

    match method {
        PromptMethod::Caa => {
            let mut vector = caa_from_state_pairs(&[(h_pos, h_neg)], layer)?;
            vector.method = SteerMethod::PromptCaa;
            vector.source_hash = source_hash;
            vector.degenerate = prompt.is_empty() || vector.norm == 0.0;
            Ok(vector)
        }
        PromptMethod::Sta => {
            let sae =
                sae.ok_or_else(|| Error::Config("prompt STA conversion needs an SAE".to_string()))?;
            if sae.d_input() != model.config.d_model {
                return Err(Error::Config(format!(
                    "SAE input dim {} vs model d_model {}",
                    sae.d_input(),
                    model.config.d_model
                )));
            }
            let a_pos = encode(sae, &h_pos)?;
            let a_neg = encode(sae, &h_neg)?;
            let stats = atom_stats_from_encoded(&[(a_pos, a_neg)], layer)?;
            let thresholds = thresholds_from_fraction(&stats, sta_options.top_fraction)?;
            let mut vector = build_sta_vector(
                &stats,
                sae,
                &thresholds,
                SelectionMode::Full,
                sta_options.include_decoder_bias,
                &source_hash,
            )?;
            vector.method = SteerMethod::PromptSta;
            vector.degenerate = prompt.is_empty();
            Ok(vector)
        }
    }
}

/// Model-space decode difference `mean_i(decode(a_pos_i) - decode(a_neg_i))`;
/// the independent identity that pass-all selection with the bias off must
/// reproduce.
pub fn mean_decoded_difference(sae: &SaeParams, pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs".to_string()));
    }
    let d = sae.d_input();
    let mut acc = vec![0.0; d];
    for (a_pos, a_neg) in pairs {
        let dec_pos = decode(sae, a_pos)?;
        let dec_neg = decode(sae, a_neg)?;
        for i in 0..d {
            acc[i] += dec_pos.data()[i] - dec_neg.data()[i];
        }
    }
    let n = pairs.len() as f64;
    for v in &mut acc {
        *v /= n;
    }
    Ok(Tensor::from_vec(acc))
}
