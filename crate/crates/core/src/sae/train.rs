//! SAE training with straight-through estimators, plus a finite-difference
//! gradient checker for the trainer's gradients.
//!
//! The hard threshold and the L0 count get rectangle-kernel pseudo-derivatives
//! of width `bandwidth` around theta (the usual JumpReLU recipe):
//!
//! * `d a_j / d z_j    := 1[z_j > theta_j]`
//! * `d a_j / d theta_j := -(theta_j / eps) * rect((z_j - theta_j) / eps)`
//! * `d L0_j / d theta_j := -(1 / eps) * rect((z_j - theta_j) / eps)`
//!
//! Away from the kernel support these coincide with the true local gradient
//! of the (piecewise-smooth) hard loss, which is what the checker verifies.

use serde::{Deserialize, Serialize};

use super::SaeParams;
use crate::error::{Error, Result};
use crate::rng::{gaussian_fill, rng_from_seed};
use crate::tensor::Tensor;

const INIT_THETA: f64 = 1e-3;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaeOptimizer {
    /// Plain momentum-free gradient descent. At toy step counts it cannot
    /// move thresholds off their tiny init (the log-space chain rule scales
    /// updates by theta), so Adam is the default.
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub m_latent: usize,
    /// Sparsity weight.
    pub gamma: f64,
    /// Straight-through rectangle-kernel width around theta.
    pub bandwidth: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: SaeOptimizer,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            m_latent: 256,
            gamma: 0.02,
            bandwidth: 0.05,
            lr: 0.01,
            steps: 500,
            seed: 0,
            batch_size: 128,
            optimizer: SaeOptimizer::Adam,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_latent == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "m_latent and batch_size must be positive".to_string(),
            ));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Parameter(format!(
                "gamma must be finite and nonnegative, got {}",
                self.gamma
            )));
        }
        if self.bandwidth <= 0.0 || !self.bandwidth.is_finite() {
            return Err(Error::Parameter(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Parameter(format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: SaeOptimizer,
    /// Per-step batch losses (total), measured before each update.
    pub losses: Vec<f64>,
    /// Full-dataset reconstruction loss before/after training.
    pub initial_recon: f64,
    pub final_recon: f64,
    /// Full-dataset mean number of active atoms after training.
    pub final_mean_l0: f64,
    /// Both loss terms are per-example means.
    pub loss_normalization: String,
}

// ---------------------------------------------------------------------------
// STE gradients
// ---------------------------------------------------------------------------

pub(crate) struct SaeGrads {
    pub w_enc: Tensor,
    pub b_enc: Tensor,
    pub w_dec: Tensor,
    pub b_dec: Tensor,
    /// Gradient with respect to theta in its natural (not log) space.
    pub theta: Tensor,
}

impl SaeGrads {
    fn zeros(d: usize, m: usize) -> Self {
        SaeGrads {
            w_enc: Tensor::zeros(vec![d, m]),
            b_enc: Tensor::zeros(vec![m]),
            w_dec: Tensor::zeros(vec![m, d]),
            b_dec: Tensor::zeros(vec![d]),
            theta: Tensor::zeros(vec![m]),
        }
    }
}

pub(crate) struct SaePass {
    pub total: f64,
    pub grads: SaeGrads,
    /// `[N, M]` pre-activations, kept for the checker's skip rule.
    pub z: Tensor,
}

/// Loss over a batch of rows plus straight-through gradients.
pub(crate) fn loss_and_ste_grads(
    params: &SaeParams,
    rows: &[f64],
    n_rows: usize,
    gamma: f64,
    bandwidth: f64,
) -> SaePass {
    let d = params.d_input();
    let m = params.m_latent();
    let inv_n = 1.0 / n_rows as f64;
    let mut grads = SaeGrads::zeros(d, m);
    let mut z_all = Tensor::zeros(vec![n_rows, m]);
    let mut recon = 0.0;
    let mut active_total = 0.0;

    let mut hc = vec![0.0; d];
    let mut z = vec![0.0; m];
    let mut a = vec![0.0; m];
    let mut r = vec![0.0; d];
    let mut d_a = vec![0.0; m];
    let mut d_z = vec![0.0; m];

    for row_idx in 0..n_rows {
        let h_row = &rows[row_idx * d..(row_idx + 1) * d];
        for i in 0..d {
            hc[i] = h_row[i] - params.input_mean.data()[i];
        }
        // z = hc W_enc + b_enc
        z.copy_from_slice(params.b_enc.data());
        for i in 0..d {
            let h_i = hc[i];
            if h_i == 0.0 {
                continue;
            }
            let w_row = &params.w_enc.data()[i * m..(i + 1) * m];
            for (zv, &w) in z.iter_mut().zip(w_row) {
                *zv += h_i * w;
            }
        }
        z_all.row_mut(row_idx).copy_from_slice(&z);
        // JumpReLU
        let mut active = 0usize;
        for j in 0..m {
            if z[j] > params.theta.data()[j] {
                a[j] = z[j];
                active += 1;
            } else {
                a[j] = 0.0;
            }
        }
        active_total += active as f64;
        // Reconstruction in centered space: err = hc - (a W_dec + b_dec).
        decode_centered(params, &a, &mut r);
        let mut d_r = vec![0.0; d];
        for i in 0..d {
            let e = hc[i] - r[i];
            recon += e * e;
            // dL/dr = -2 e / N
            d_r[i] = -2.0 * e * inv_n;
        }
        // Decoder grads.
        for j in 0..m {
            if a[j] != 0.0 {
                let g_row = &mut grads.w_dec.data_mut()[j * d..(j + 1) * d];
                for (g, &dr) in g_row.iter_mut().zip(&d_r) {
                    *g += a[j] * dr;
                }
            }
        }
        for (g, &dr) in grads.b_dec.data_mut().iter_mut().zip(&d_r) {
            *g += dr;
        }
        // d_a = d_r W_dec^T
        for j in 0..m {
            let w_row = &params.w_dec.data()[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for i in 0..d {
                acc += d_r[i] * w_row[i];
            }
            d_a[j] = acc;
        }
        // Straight-through: gate for z, rectangle kernel for theta.
        for j in 0..m {
            let theta_j = params.theta.data()[j];
            let u = z[j] - theta_j;
            d_z[j] = if u > 0.0 { d_a[j] } else { 0.0 };
            if u.abs() <= 0.5 * bandwidth {
                let kernel = 1.0 / bandwidth;
                grads.theta.data_mut()[j] +=
                    d_a[j] * (-theta_j * kernel) + gamma * inv_n * (-kernel);
            }
        }
        // Encoder grads.
        for i in 0..d {
            let h_i = hc[i];
            if h_i != 0.0 {
                let g_row = &mut grads.w_enc.data_mut()[i * m..(i + 1) * m];
                for (g, &dz) in g_row.iter_mut().zip(&d_z) {
                    *g += h_i * dz;
                }
            }
        }
        for (g, &dz) in grads.b_enc.data_mut().iter_mut().zip(&d_z) {
            *g += dz;
        }
    }

    SaePass {
        total: (recon + gamma * active_total) * inv_n,
        grads,
        z: z_all,
    }
}

/// `a W_dec + b_dec` without the input-mean offset (reconstruction target
/// is the centered state; the mean cancels out of the error).
fn decode_centered(params: &SaeParams, a_row: &[f64], out: &mut [f64]) {
    out.copy_from_slice(params.b_dec.data());
    let d = params.d_input();
    for (j, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let w_row = &params.w_dec.data()[j * d..(j + 1) * d];
        for (o, &w) in out.iter_mut().zip(w_row) {
            *o += a * w;
        }
    }
}

/// Hard loss on a batch of centered-space rows; used by the gradient checker.
fn hard_loss(params: &SaeParams, rows: &[f64], n_rows: usize, gamma: f64) -> f64 {
    let d = params.d_input();
    let m = params.m_latent();
    let mut recon = 0.0;
    let mut active = 0.0;
    let mut a = vec![0.0; m];
    let mut r = vec![0.0; d];
    for row_idx in 0..n_rows {
        let h_row = &rows[row_idx * d..(row_idx + 1) * d];
        super::encode_row(params, h_row, &mut a);
        decode_centered(params, &a, &mut r);
        for i in 0..d {
            let hc = h_row[i] - params.input_mean.data()[i];
            let e = hc - r[i];
            recon += e * e;
        }
        active += a.iter().filter(|&&v| v != 0.0).count() as f64;
    }
    (recon + gamma * active) / n_rows as f64
}

// ---------------------------------------------------------------------------
// Initialization and training
// ---------------------------------------------------------------------------

/// Seeded initialization: unit-norm random decoder rows, encoder tied to the
/// decoder transpose, zero biases, thresholds at `INIT_THETA`.
pub(crate) fn init_params(d: usize, m: usize, seed: u64) -> SaeParams {
    let mut rng = rng_from_seed(seed);
    let mut w_dec = Tensor::zeros(vec![m, d]);
    gaussian_fill(&mut rng, 1.0, w_dec.data_mut());
    for j in 0..m {
        let row = w_dec.row_mut(j);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row {
            *v /= norm;
        }
    }
    let mut w_enc = Tensor::zeros(vec![d, m]);
    for j in 0..m {
        for i in 0..d {
            w_enc.data_mut()[i * m + j] = w_dec.data()[j * d + i];
        }
    }
    SaeParams {
        w_enc,
        b_enc: Tensor::zeros(vec![m]),
        w_dec,
        b_dec: Tensor::zeros(vec![d]),
        theta: Tensor::filled(vec![m], INIT_THETA),
        input_mean: Tensor::zeros(vec![d]),
    }
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, w: &mut [f64], g: &[f64], lr: f64, t: usize) {
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..w.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            w[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
}

fn sgd_update(w: &mut [f64], g: &[f64], lr: f64) {
    for (wv, &gv) in w.iter_mut().zip(g) {
        *wv -= lr * gv;
    }
}

/// Train a JumpReLU SAE on `[N, D]` activations.
///
/// Thresholds are optimized as `exp(log_theta)` to stay positive; decoder
/// rows are renormalized to unit norm after every update. Activations are
/// mean-centered with the dataset mean, which is stored in the returned
/// params and re-applied by `encode`/`decode`.
pub fn train_sae(activations: &Tensor, config: &SaeTrainConfig) -> Result<(SaeParams, SaeTrainReport)> {
    config.validate()?;
    let (n_rows, d) = activations.dims2().map_err(|_| {
        Error::Dimension(format!(
            "activations must be [N, D], got shape {:?}",
            activations.shape()
        ))
    })?;
    if n_rows == 0 {
        return Err(Error::Input("no activation rows to train on".to_string()));
    }
    if config.m_latent <= d {
        return Err(Error::Parameter(format!(
            "latent size {} must exceed input dimension {d}",
            config.m_latent
        )));
    }
    activations.check_finite("sae training activations")?;

    let m = config.m_latent;
    let mut params = init_params(d, m, config.seed);

    if config.steps == 0 {
        let initial_recon = sae_recon_full(&params, activations);
        let final_mean_l0 = super::mean_l0(&params, activations)?;
        return Ok((
            params.clone(),
            SaeTrainReport {
                steps: 0,
                batch_size: config.batch_size,
                optimizer: config.optimizer,
                losses: Vec::new(),
                initial_recon,
                final_recon: initial_recon,
                final_mean_l0,
                loss_normalization: "per-token-mean".to_string(),
            },
        ));
    }

    // Dataset mean, stored and applied symmetrically by encode/decode.
    {
        let mean = params.input_mean.data_mut();
        for r in 0..n_rows {
            let row = activations.row(r);
            for i in 0..d {
                mean[i] += row[i];
            }
        }
        for v in mean.iter_mut() {
            *v /= n_rows as f64;
        }
    }

    let initial_recon = sae_recon_full(&params, activations);

    let mut log_theta: Vec<f64> = params.theta.data().iter().map(|t| t.ln()).collect();
    let batch = config.batch_size.min(n_rows);
    let mut adam: Vec<AdamSlot> = match config.optimizer {
        SaeOptimizer::Adam => vec![
            AdamSlot::new(d * m),
            AdamSlot::new(m),
            AdamSlot::new(m * d),
            AdamSlot::new(d),
            AdamSlot::new(m),
        ],
        SaeOptimizer::Sgd => Vec::new(),
    };

    let mut losses = Vec::with_capacity(config.steps);
    let mut cursor = 0usize;
    let mut batch_rows = vec![0.0; batch * d];
    for step in 1..=config.steps {
        for b in 0..batch {
            let row = activations.row((cursor + b) % n_rows);
            batch_rows[b * d..(b + 1) * d].copy_from_slice(row);
        }
        cursor = (cursor + batch) % n_rows;

        let pass = loss_and_ste_grads(&params, &batch_rows, batch, config.gamma, config.bandwidth);
        losses.push(pass.total);

        if config.lr > 0.0 {
            // Chain rule into log space keeps theta positive.
            let g_log_theta: Vec<f64> = pass
                .grads
                .theta
                .data()
                .iter()
                .zip(params.theta.data())
                .map(|(&g, &t)| g * t)
                .collect();
            match config.optimizer {
                SaeOptimizer::Sgd => {
                    sgd_update(params.w_enc.data_mut(), pass.grads.w_enc.data(), config.lr);
                    sgd_update(params.b_enc.data_mut(), pass.grads.b_enc.data(), config.lr);
                    sgd_update(params.w_dec.data_mut(), pass.grads.w_dec.data(), config.lr);
                    sgd_update(params.b_dec.data_mut(), pass.grads.b_dec.data(), config.lr);
                    sgd_update(&mut log_theta, &g_log_theta, config.lr);
                }
                SaeOptimizer::Adam => {
                    adam[0].update(params.w_enc.data_mut(), pass.grads.w_enc.data(), config.lr, step);
                    adam[1].update(params.b_enc.data_mut(), pass.grads.b_enc.data(), config.lr, step);
                    adam[2].update(params.w_dec.data_mut(), pass.grads.w_dec.data(), config.lr, step);
                    adam[3].update(params.b_dec.data_mut(), pass.grads.b_dec.data(), config.lr, step);
                    adam[4].update(&mut log_theta, &g_log_theta, config.lr, step);
                }
            }
            for (t, &lt) in params.theta.data_mut().iter_mut().zip(&log_theta) {
                *t = lt.exp();
            }
            // Unit decoder rows: sparsity cannot be gamed by decoder scale.
            for j in 0..m {
                let row = params.w_dec.row_mut(j);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in row {
                        *v /= norm;
                    }
                }
            }
        }
    }

    let final_recon = sae_recon_full(&params, activations);
    let final_mean_l0 = super::mean_l0(&params, activations)?;
    let report = SaeTrainReport {
        steps: config.steps,
        batch_size: batch,
        optimizer: config.optimizer,
        losses,
        initial_recon,
        final_recon,
        final_mean_l0,
        loss_normalization: "per-token-mean".to_string(),
    };
    Ok((params, report))
}

fn sae_recon_full(params: &SaeParams, activations: &Tensor) -> f64 {
    super::sae_loss(params, activations, 0.0)
        .expect("gamma 0 is valid")
        .recon
}

// ---------------------------------------------------------------------------
// Gradient checker
// ---------------------------------------------------------------------------

/// Compare the trainer's straight-through gradients against central finite
/// differences of the hard loss (step 1e-5).
///
/// Coordinates that influence an atom whose pre-activation sits within
/// `2 * bandwidth` of its threshold on any row are skipped: there the hard
/// loss is discontinuous and only the kernel pseudo-gradient exists.
/// Everywhere else the straight-through gradient equals the true local
/// gradient. Returns the max error, `|analytic - fd| / max(|analytic|, |fd|, 1)`.
pub fn gradient_check(params: &SaeParams, h: &Tensor, config: &SaeTrainConfig) -> Result<f64> {
    config.validate()?;
    params.validate()?;
    let d = params.d_input();
    let (rows, n_rows) = match h.shape() {
        [dd] if *dd == d => (h.data(), 1),
        [n, dd] if *dd == d => (h.data(), *n),
        other => {
            return Err(Error::Dimension(format!(
                "gradient_check input shape {other:?} incompatible with D={d}"
            )))
        }
    };
    let m = params.m_latent();
    let pass = loss_and_ste_grads(params, rows, n_rows, config.gamma, config.bandwidth);

    // Atoms with a near-threshold pre-activation anywhere in the batch.
    let mut near_crossing = vec![false; m];
    for r in 0..n_rows {
        let z_row = pass.z.row(r);
        for j in 0..m {
            if (z_row[j] - params.theta.data()[j]).abs() < 2.0 * config.bandwidth {
                near_crossing[j] = true;
            }
        }
    }

    const FD_STEP: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |params: &SaeParams,
                     select: &dyn Fn(&mut SaeParams) -> &mut Tensor,
                     analytic: &Tensor,
                     skip: &dyn Fn(usize) -> bool| {
        for idx in 0..analytic.len() {
            if skip(idx) {
                continue;
            }
            let mut bumped = params.clone();
            select(&mut bumped).data_mut()[idx] += FD_STEP;
            let plus = hard_loss(&bumped, rows, n_rows, config.gamma);
            let mut bumped = params.clone();
            select(&mut bumped).data_mut()[idx] -= FD_STEP;
            let minus = hard_loss(&bumped, rows, n_rows, config.gamma);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[idx];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    };

    check(
        params,
        &|p| &mut p.w_enc,
        &pass.grads.w_enc,
        &|idx| near_crossing[idx % m],
    );
    check(
        params,
        &|p| &mut p.b_enc,
        &pass.grads.b_enc,
        &|idx| near_crossing[idx],
    );
    check(params, &|p| &mut p.w_dec, &pass.grads.w_dec, &|_| false);
    check(params, &|p| &mut p.b_dec, &pass.grads.b_dec, &|_| false);
    check(
        params,
        &|p| &mut p.theta,
        &pass.grads.theta,
        &|idx| near_crossing[idx],
    );

    Ok(worst)
}
