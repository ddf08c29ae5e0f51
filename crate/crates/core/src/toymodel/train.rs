//! Teacher-forced training for the toy model: hand-rolled backprop and an
//! Adam loop over a deterministic cyclic batch schedule.

use serde::{Deserialize, Serialize};

use super::{AttnCache, LayerNormParams, MlpCache, ToyModel, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_slice, transpose, Tensor};

const BATCH_SIZE: usize = 8;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Mean cross-entropy of each step's batch, measured before the update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

// ---------------------------------------------------------------------------
// Parameter registry: a fixed flattening order shared by grads and Adam.
// ---------------------------------------------------------------------------

pub(crate) fn param_refs(model: &ToyModel) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = vec![&model.tok_emb, &model.pos_emb];
    for b in &model.blocks {
        out.extend([
            &b.ln1.gain,
            &b.ln1.bias,
            &b.w_q,
            &b.w_k,
            &b.w_v,
            &b.w_o,
            &b.ln2.gain,
            &b.ln2.bias,
            &b.w_fc1,
            &b.b_fc1,
            &b.w_fc2,
            &b.b_fc2,
        ]);
    }
    out.push(&model.ln_f.gain);
    out.push(&model.ln_f.bias);
    out
}

pub(crate) fn param_refs_mut(model: &mut ToyModel) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = vec![&mut model.tok_emb, &mut model.pos_emb];
    for b in &mut model.blocks {
        out.extend([
            &mut b.ln1.gain,
            &mut b.ln1.bias,
            &mut b.w_q,
            &mut b.w_k,
            &mut b.w_v,
            &mut b.w_o,
            &mut b.ln2.gain,
            &mut b.ln2.bias,
            &mut b.w_fc1,
            &mut b.b_fc1,
            &mut b.w_fc2,
            &mut b.b_fc2,
        ]);
    }
    out.push(&mut model.ln_f.gain);
    out.push(&mut model.ln_f.bias);
    out
}

fn zero_grads(model: &ToyModel) -> Vec<Tensor> {
    param_refs(model)
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect()
}

// Indices into the registry for a given block.
fn block_base(layer: usize) -> usize {
    2 + layer * 12
}

// ---------------------------------------------------------------------------
// Cached forward pass (same code path as inference)
// ---------------------------------------------------------------------------

struct LayerCache {
    x_in: Tensor,
    ln1_out: Tensor,
    attn: AttnCache,
    x_mid: Tensor,
    ln2_out: Tensor,
    mlp: MlpCache,
}

pub(crate) struct SeqCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Tensor,
    lnf_out: Tensor,
    pub logits: Tensor,
}

pub(crate) fn forward_cache(model: &ToyModel, tokens: &[u32]) -> SeqCache {
    let mut x = model.embed(tokens);
    let mut layers = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let x_in = x.clone();
        let ln1_out = model.apply_ln(&x_in, &block.ln1);
        let attn = model.attention(block, &ln1_out);
        let x_mid = x_in.add(&attn.out).expect("residual shapes agree");
        let ln2_out = model.apply_ln(&x_mid, &block.ln2);
        let mlp = model.mlp(block, &ln2_out);
        x = x_mid.add(&mlp.out).expect("residual shapes agree");
        layers.push(LayerCache {
            x_in,
            ln1_out,
            attn,
            x_mid,
            ln2_out,
            mlp,
        });
    }
    let lnf_out = model.apply_ln(&x, &model.ln_f);
    let unembed = transpose(&model.tok_emb).expect("tok_emb is 2-D");
    let logits = matmul(&lnf_out, &unembed).expect("shapes fixed by construction");
    SeqCache {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        lnf_out,
        logits,
    }
}

/// Mean next-token cross-entropy over positions `0..T-1`, and its gradient
/// with respect to the logits.
pub(crate) fn ce_loss_and_dlogits(logits: &Tensor, tokens: &[u32]) -> (f64, Tensor) {
    let (t_len, vocab) = (logits.shape()[0], logits.shape()[1]);
    let n_targets = (t_len - 1) as f64;
    let mut dlogits = Tensor::zeros(vec![t_len, vocab]);
    let mut loss = 0.0;
    for t in 0..t_len - 1 {
        let target = tokens[t + 1] as usize;
        let probs = softmax_slice(logits.row(t), 1.0).expect("temperature 1 is valid");
        loss -= probs[target].max(f64::MIN_POSITIVE).ln();
        let drow = dlogits.row_mut(t);
        for (j, &p) in probs.iter().enumerate() {
            drow[j] = p / n_targets;
        }
        drow[target] -= 1.0 / n_targets;
    }
    (loss / n_targets, dlogits)
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Layer-norm backward for a whole `[T, d]` tensor; returns `dx` and
/// accumulates parameter grads.
fn ln_backward(
    x: &Tensor,
    ln: &LayerNormParams,
    dy: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let (t_len, d) = (x.shape()[0], x.shape()[1]);
    let n = d as f64;
    let mut dx = Tensor::zeros(vec![t_len, d]);
    for t in 0..t_len {
        let xr = x.row(t);
        let dyr = dy.row(t);
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let xhat = (xr[i] - mean) * inv;
            let dxhat = dyr[i] * ln.gain.data()[i];
            dgain.data_mut()[i] += dyr[i] * xhat;
            dbias.data_mut()[i] += dyr[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let dxr = dx.row_mut(t);
        for i in 0..d {
            let xhat = (xr[i] - mean) * inv;
            let dxhat = dyr[i] * ln.gain.data()[i];
            dxr[i] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    dx
}

/// `a^T * b` accumulated into `out`.
fn accumulate_matmul_t(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (t_len, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    for t in 0..t_len {
        let ar = a.row(t);
        let br = b.row(t);
        for i in 0..m {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let or = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

fn accumulate_col_sums(a: &Tensor, out: &mut Tensor) {
    let (t_len, d) = (a.shape()[0], a.shape()[1]);
    for t in 0..t_len {
        let row = a.row(t);
        for i in 0..d {
            out.data_mut()[i] += row[i];
        }
    }
}

pub(crate) fn backward(model: &ToyModel, cache: &SeqCache, dlogits: &Tensor, grads: &mut [Tensor]) {
    let d = model.config.d_model;
    let n_heads = model.config.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = cache.tokens.len();
    let n_params = grads.len();

    // logits = lnf_out * tok_emb^T
    let d_lnf_out = matmul(dlogits, &model.tok_emb).expect("shapes fixed by construction");
    accumulate_matmul_t(dlogits, &cache.lnf_out, &mut grads[0]); // tok_emb (unembed tie)

    let (lnf_gain_idx, lnf_bias_idx) = (n_params - 2, n_params - 1);
    let (left, right) = grads.split_at_mut(lnf_bias_idx);
    let mut d_x = {
        let (head, gain_slot) = left.split_at_mut(lnf_gain_idx);
        let _ = head;
        ln_backward(
            &cache.x_final,
            &model.ln_f,
            &d_lnf_out,
            &mut gain_slot[0],
            &mut right[0],
        )
    };

    for (l, block) in model.blocks.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let base = block_base(l);

        // MLP branch: x_out = x_mid + mlp(ln2(x_mid))
        let d_mlp_out = &d_x;
        accumulate_matmul_t(&lc.mlp.h1, d_mlp_out, &mut grads[base + 10]); // w_fc2
        accumulate_col_sums(d_mlp_out, &mut grads[base + 11]); // b_fc2
        let w_fc2_t = transpose(&block.w_fc2).expect("w_fc2 is 2-D");
        let mut d_h1 = matmul(d_mlp_out, &w_fc2_t).expect("shapes fixed by construction");
        // ReLU mask
        for t in 0..t_len {
            let h1r = lc.mlp.h1.row(t).to_vec();
            let dr = d_h1.row_mut(t);
            for (dv, h1v) in dr.iter_mut().zip(h1r) {
                if h1v <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        accumulate_matmul_t(&lc.ln2_out, &d_h1, &mut grads[base + 8]); // w_fc1
        accumulate_col_sums(&d_h1, &mut grads[base + 9]); // b_fc1
        let w_fc1_t = transpose(&block.w_fc1).expect("w_fc1 is 2-D");
        let d_ln2_out = matmul(&d_h1, &w_fc1_t).expect("shapes fixed by construction");
        let d_x_mid_ln = {
            let (a, b) = grads.split_at_mut(base + 7);
            ln_backward(&lc.x_mid, &block.ln2, &d_ln2_out, &mut a[base + 6], &mut b[0])
        };
        let d_x_mid = d_x.add(&d_x_mid_ln).expect("shapes agree");

        // Attention branch: x_mid = x_in + W_o(ctx(ln1(x_in)))
        accumulate_matmul_t(&lc.attn.ctx, &d_x_mid, &mut grads[base + 5]); // w_o
        let w_o_t = transpose(&block.w_o).expect("w_o is 2-D");
        let d_ctx = matmul(&d_x_mid, &w_o_t).expect("shapes fixed by construction");

        let mut d_q = Tensor::zeros(vec![t_len, d]);
        let mut d_k = Tensor::zeros(vec![t_len, d]);
        let mut d_v = Tensor::zeros(vec![t_len, d]);
        for h in 0..n_heads {
            let off = h * dh;
            let w_head = &lc.attn.weights[h];
            for t in 0..t_len {
                let d_ctx_t = &d_ctx.row(t)[off..off + dh];
                // dv and dw from ctx_t = sum_s w[t][s] * v_s
                let mut dw = vec![0.0; t + 1];
                for s in 0..=t {
                    let w_ts = w_head.get2(t, s);
                    let v_s = &lc.attn.v.row(s)[off..off + dh];
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += d_ctx_t[i] * v_s[i];
                        d_v.row_mut(s)[off + i] += w_ts * d_ctx_t[i];
                    }
                    dw[s] = dot;
                }
                // softmax backward on the causal row
                let mut w_dot_dw = 0.0;
                for s in 0..=t {
                    w_dot_dw += w_head.get2(t, s) * dw[s];
                }
                let q_t = lc.attn.q.row(t)[off..off + dh].to_vec();
                for s in 0..=t {
                    let ds = w_head.get2(t, s) * (dw[s] - w_dot_dw) * scale;
                    let k_s = &lc.attn.k.row(s)[off..off + dh];
                    for i in 0..dh {
                        d_q.row_mut(t)[off + i] += ds * k_s[i];
                        d_k.row_mut(s)[off + i] += ds * q_t[i];
                    }
                }
            }
        }

        accumulate_matmul_t(&lc.ln1_out, &d_q, &mut grads[base + 2]); // w_q
        accumulate_matmul_t(&lc.ln1_out, &d_k, &mut grads[base + 3]); // w_k
        accumulate_matmul_t(&lc.ln1_out, &d_v, &mut grads[base + 4]); // w_v
        let mut d_ln1_out =
            matmul(&d_q, &transpose(&block.w_q).expect("2-D")).expect("shapes agree");
        d_ln1_out = d_ln1_out
            .add(&matmul(&d_k, &transpose(&block.w_k).expect("2-D")).expect("shapes agree"))
            .expect("shapes agree");
        d_ln1_out = d_ln1_out
            .add(&matmul(&d_v, &transpose(&block.w_v).expect("2-D")).expect("shapes agree"))
            .expect("shapes agree");
        let d_x_in_ln = {
            let (a, b) = grads.split_at_mut(base + 1);
            ln_backward(&lc.x_in, &block.ln1, &d_ln1_out, &mut a[base], &mut b[0])
        };
        d_x = d_x_mid.add(&d_x_in_ln).expect("shapes agree");
    }

    // Embedding gradients.
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let dr = d_x.row(t).to_vec();
        let te = grads[0].row_mut(tok as usize);
        for i in 0..d {
            te[i] += dr[i];
        }
        let pe = grads[1].row_mut(t);
        for i in 0..d {
            pe[i] += dr[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(model: &ToyModel) -> Self {
        let sizes: Vec<usize> = param_refs(model).iter().map(|p| p.len()).collect();
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ToyModel, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (idx, param) in param_refs_mut(model).into_iter().enumerate() {
            let g = grads[idx].data();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = param.data_mut();
            for i in 0..w.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Teacher-forced cross-entropy training over a deterministic cyclic batch
/// schedule. The loss trajectory is recorded before each update, so `lr = 0`
/// yields a constant trajectory.
pub fn train_toy(
    model: &mut ToyModel,
    corpus: &[Vec<u32>],
    steps: usize,
    lr: f64,
) -> Result<TrainingReport> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".to_string()));
    }
    if steps == 0 {
        return Err(Error::Parameter("steps must be at least 1".to_string()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    for (i, seq) in corpus.iter().enumerate() {
        model.validate_tokens(seq)?;
        if seq.len() < 2 {
            return Err(Error::Input(format!(
                "corpus sequence {i} has fewer than 2 tokens; nothing to predict"
            )));
        }
    }

    let batch_size = BATCH_SIZE.min(corpus.len());
    let mut adam = Adam::new(model);
    let mut losses = Vec::with_capacity(steps);
    let mut cursor = 0usize;

    for _ in 0..steps {
        let mut grads = zero_grads(model);
        let mut batch_loss = 0.0;
        for _ in 0..batch_size {
            let seq = &corpus[cursor];
            cursor = (cursor + 1) % corpus.len();
            let cache = forward_cache(model, seq);
            let (loss, mut dlogits) = ce_loss_and_dlogits(&cache.logits, seq);
            batch_loss += loss;
            for v in dlogits.data_mut() {
                *v /= batch_size as f64;
            }
            backward(model, &cache, &dlogits, &mut grads);
        }
        batch_loss /= batch_size as f64;
        losses.push(batch_loss);
        if lr > 0.0 {
            adam.step(model, &grads, lr);
        }
    }

    Ok(TrainingReport {
        steps,
        lr,
        batch_size,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("steps >= 1"),
        losses,
    })
}
