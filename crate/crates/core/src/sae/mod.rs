//! JumpReLU sparse autoencoder over residual-stream states.
//!
//! Encode projects a `D`-dimensional state into `M > D` nonnegative atom
//! activations through a per-atom jump threshold; decode maps activations
//! back through the decoder rows ("atom directions") plus bias. Training
//! lives in [`train`], along with a finite-difference gradient checker.

mod train;

pub use train::{gradient_check, train_sae, SaeOptimizer, SaeTrainConfig, SaeTrainReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAE_FORMAT: &str = "sae";
pub const SAE_FORMAT_VERSION: u32 = 1;

/// Encoder/decoder weights, biases, JumpReLU thresholds, and the dataset
/// mean subtracted before encoding (and added back after decoding).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    /// `[D, M]`
    pub w_enc: Tensor,
    /// `[M]`
    pub b_enc: Tensor,
    /// `[M, D]`; rows are atom directions, unit-normalized by training.
    pub w_dec: Tensor,
    /// `[D]`
    pub b_dec: Tensor,
    /// `[M]`, nonnegative jump thresholds.
    pub theta: Tensor,
    /// `[D]` dataset mean; zero for hand-built or untrained params.
    pub input_mean: Tensor,
}

impl SaeParams {
    pub fn new(
        w_enc: Tensor,
        b_enc: Tensor,
        w_dec: Tensor,
        b_dec: Tensor,
        theta: Tensor,
    ) -> Result<Self> {
        let d = b_dec.len();
        let params = SaeParams {
            input_mean: Tensor::zeros(vec![d]),
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn d_input(&self) -> usize {
        self.b_dec.len()
    }

    pub fn m_latent(&self) -> usize {
        self.b_enc.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_input();
        let m = self.m_latent();
        if self.w_enc.shape() != [d, m] {
            return Err(Error::Dimension(format!(
                "w_enc shape {:?}, expected [{d}, {m}]",
                self.w_enc.shape()
            )));
        }
        if self.w_dec.shape() != [m, d] {
            return Err(Error::Dimension(format!(
                "w_dec shape {:?}, expected [{m}, {d}]",
                self.w_dec.shape()
            )));
        }
        if self.theta.shape() != [m] {
            return Err(Error::Dimension(format!(
                "theta shape {:?}, expected [{m}]",
                self.theta.shape()
            )));
        }
        if self.input_mean.shape() != [d] {
            return Err(Error::Dimension(format!(
                "input_mean shape {:?}, expected [{d}]",
                self.input_mean.shape()
            )));
        }
        if let Some(t) = self.theta.data().iter().find(|&&t| t < 0.0) {
            return Err(Error::Parameter(format!(
                "JumpReLU thresholds must be nonnegative, found {t}"
            )));
        }
        Ok(())
    }
}

/// Interprets a tensor as rows of `expected_last` values: accepts `[D]` or
/// `[N, D]`, returns (rows, n_rows).
fn as_rows<'a>(t: &'a Tensor, expected_last: usize, what: &str) -> Result<(&'a [f64], usize)> {
    match t.shape() {
        [d] if *d == expected_last => Ok((t.data(), 1)),
        [n, d] if *d == expected_last => Ok((t.data(), *n)),
        other => Err(Error::Dimension(format!(
            "{what}: expected trailing dimension {expected_last}, got shape {other:?}"
        ))),
    }
}

fn rows_shape(input: &Tensor, n_rows: usize, last: usize) -> Vec<usize> {
    if input.rank() == 1 {
        vec![last]
    } else {
        vec![n_rows, last]
    }
}

/// `a = z * 1[z > theta]` with `z = (h - mean) W_enc + b_enc`.
/// Zeroed coordinates are exact zeros.
pub fn encode(params: &SaeParams, h: &Tensor) -> Result<Tensor> {
    let d = params.d_input();
    let m = params.m_latent();
    let (data, n_rows) = as_rows(h, d, "encode input")?;
    let mut out = vec![0.0; n_rows * m];
    for r in 0..n_rows {
        let h_row = &data[r * d..(r + 1) * d];
        let a_row = &mut out[r * m..(r + 1) * m];
        encode_row(params, h_row, a_row);
    }
    Tensor::new(rows_shape(h, n_rows, m), out)
}

pub(crate) fn encode_row(params: &SaeParams, h_row: &[f64], a_row: &mut [f64]) {
    let d = params.d_input();
    let m = params.m_latent();
    a_row.copy_from_slice(params.b_enc.data());
    for i in 0..d {
        let hc = h_row[i] - params.input_mean.data()[i];
        if hc == 0.0 {
            continue;
        }
        let w_row = &params.w_enc.data()[i * m..(i + 1) * m];
        for (a, &w) in a_row.iter_mut().zip(w_row) {
            *a += hc * w;
        }
    }
    for (a, &t) in a_row.iter_mut().zip(params.theta.data()) {
        if *a <= t {
            *a = 0.0;
        }
    }
}

/// `h_hat = a W_dec + b_dec + mean`.
pub fn decode(params: &SaeParams, a: &Tensor) -> Result<Tensor> {
    let d = params.d_input();
    let m = params.m_latent();
    let (data, n_rows) = as_rows(a, m, "decode input")?;
    let mut out = vec![0.0; n_rows * d];
    for r in 0..n_rows {
        let a_row = &data[r * m..(r + 1) * m];
        let h_row = &mut out[r * d..(r + 1) * d];
        decode_row(params, a_row, h_row);
    }
    Tensor::new(rows_shape(a, n_rows, d), out)
}

pub(crate) fn decode_row(params: &SaeParams, a_row: &[f64], h_row: &mut [f64]) {
    let d = params.d_input();
    for (h, (&b, &mu)) in h_row
        .iter_mut()
        .zip(params.b_dec.data().iter().zip(params.input_mean.data()))
    {
        *h = b + mu;
    }
    for (j, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let w_row = &params.w_dec.data()[j * d..(j + 1) * d];
        for (h, &w) in h_row.iter_mut().zip(w_row) {
            *h += a * w;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
}

/// Reconstruction + L0 sparsity loss, both averaged per example:
/// `mean_i ||h_i - decode(encode(h_i))||^2 + gamma * mean_i L0(a_i)`.
pub fn sae_loss(params: &SaeParams, h: &Tensor, gamma: f64) -> Result<LossBreakdown> {
    if gamma < 0.0 {
        return Err(Error::Parameter(format!(
            "sparsity weight gamma must be nonnegative, got {gamma}"
        )));
    }
    let d = params.d_input();
    let m = params.m_latent();
    let (data, n_rows) = as_rows(h, d, "loss input")?;
    let mut recon = 0.0;
    let mut active = 0.0;
    let mut a_row = vec![0.0; m];
    let mut r_row = vec![0.0; d];
    for r in 0..n_rows {
        let h_row = &data[r * d..(r + 1) * d];
        encode_row(params, h_row, &mut a_row);
        decode_row(params, &a_row, &mut r_row);
        for i in 0..d {
            let e = h_row[i] - r_row[i];
            recon += e * e;
        }
        active += a_row.iter().filter(|&&a| a != 0.0).count() as f64;
    }
    let recon = recon / n_rows as f64;
    let sparsity = gamma * active / n_rows as f64;
    Ok(LossBreakdown {
        total: recon + sparsity,
        recon,
        sparsity,
    })
}

/// Mean number of active atoms per row.
pub fn mean_l0(params: &SaeParams, h: &Tensor) -> Result<f64> {
    let d = params.d_input();
    let m = params.m_latent();
    let (data, n_rows) = as_rows(h, d, "l0 input")?;
    let mut a_row = vec![0.0; m];
    let mut active = 0.0;
    for r in 0..n_rows {
        encode_row(params, &data[r * d..(r + 1) * d], &mut a_row);
        active += a_row.iter().filter(|&&a| a != 0.0).count() as f64;
    }
    Ok(active / n_rows as f64)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SaeCheckpoint {
    format: String,
    version: u32,
    d_input: usize,
    m_latent: usize,
    gamma: f64,
    bandwidth: f64,
    params: SaeParams,
}

pub fn save_sae(params: &SaeParams, gamma: f64, bandwidth: f64, path: &Path) -> Result<()> {
    let checkpoint = SaeCheckpoint {
        format: SAE_FORMAT.to_string(),
        version: SAE_FORMAT_VERSION,
        d_input: params.d_input(),
        m_latent: params.m_latent(),
        gamma,
        bandwidth,
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&checkpoint)?)?;
    Ok(())
}

pub fn load_sae(path: &Path) -> Result<SaeParams> {
    let json = std::fs::read_to_string(path)?;
    let checkpoint: SaeCheckpoint = serde_json::from_str(&json)?;
    if checkpoint.format != SAE_FORMAT {
        return Err(Error::Format(format!(
            "{} holds a '{}' artifact, expected '{SAE_FORMAT}'",
            path.display(),
            checkpoint.format
        )));
    }
    if checkpoint.version != SAE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} unsupported (expected {SAE_FORMAT_VERSION}); \
             regenerate the checkpoint with this build",
            path.display(),
            checkpoint.version
        )));
    }
    if checkpoint.d_input != checkpoint.params.d_input()
        || checkpoint.m_latent != checkpoint.params.m_latent()
    {
        return Err(Error::Format(format!(
            "{}: header dims ({}, {}) disagree with weight arrays ({}, {})",
            path.display(),
            checkpoint.d_input,
            checkpoint.m_latent,
            checkpoint.params.d_input(),
            checkpoint.params.m_latent()
        )));
    }
    checkpoint.params.validate()?;
    Ok(checkpoint.params)
}
