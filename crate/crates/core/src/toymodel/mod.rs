//! Small decoder-only transformer trained from scratch on synthetic
//! corpora. Pre-LN blocks, learned positional embeddings, weight-tied
//! unembedding. Exposes per-layer residual-stream states, per-head
//! attention weights, and an additive injection hook for steering.

mod train;

pub use train::{train_toy, TrainingReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_fill, rng_from_seed};
use crate::tensor::{layer_norm_slice, matmul, softmax_slice, transpose, Tensor};

/// Reserved token ids present in every vocabulary.
pub const PAD_TOKEN: u32 = 0;
pub const BOS_TOKEN: u32 = 1;
pub const EOS_TOKEN: u32 = 2;
pub const SPACE_TOKEN: u32 = 3;
pub const RESERVED_TOKENS: usize = 4;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub const MODEL_FORMAT: &str = "toy-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED_TOKENS {
            return Err(Error::Parameter(format!(
                "vocab_size must be at least {RESERVED_TOKENS} (reserved tokens), got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(Error::Parameter(
                "d_model, n_layers, n_heads and max_seq must be positive".to_string(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn unit(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(vec![d], 1.0),
            bias: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2: LayerNormParams,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
}

/// Per-layer activations captured by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Post-block residual-stream states, one `[T, d_model]` tensor per layer.
    /// When a hook was applied, the hooked layer holds the post-injection state.
    pub hidden: Vec<Tensor>,
    /// Attention weights per layer, per head: `[T, T]`, rows summing to 1,
    /// zero weight on future positions.
    pub attention: Vec<Vec<Tensor>>,
    /// `[T, vocab_size]` logits.
    pub logits: Tensor,
}

/// Additive residual-stream intervention: after block `layer`, every token
/// position's state becomes `h + multiplier * vector`.
#[derive(Clone, Debug)]
pub struct SteerHook {
    pub layer: usize,
    pub vector: Tensor,
    pub multiplier: f64,
}

pub(crate) struct AttnCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub weights: Vec<Tensor>,
    pub ctx: Tensor,
    pub out: Tensor,
}

pub(crate) struct MlpCache {
    pub h1: Tensor,
    pub out: Tensor,
}

impl ToyModel {
    /// Initialize with all weight matrices drawn from a seeded N(0, 0.02^2);
    /// layer-norm parameters start at identity. Same seed, same bits.
    pub fn init(config: ToyModelConfig) -> Result<ToyModel> {
        config.validate()?;
        let d = config.d_model;
        let hidden = 4 * d;
        let mut rng = rng_from_seed(config.seed);
        let mut gauss = |shape: Vec<usize>| {
            let mut t = Tensor::zeros(shape);
            gaussian_fill(&mut rng, INIT_STD, t.data_mut());
            t
        };
        let tok_emb = gauss(vec![config.vocab_size, d]);
        let pos_emb = gauss(vec![config.max_seq, d]);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNormParams::unit(d),
                w_q: gauss(vec![d, d]),
                w_k: gauss(vec![d, d]),
                w_v: gauss(vec![d, d]),
                w_o: gauss(vec![d, d]),
                ln2: LayerNormParams::unit(d),
                w_fc1: gauss(vec![d, hidden]),
                b_fc1: Tensor::zeros(vec![hidden]),
                w_fc2: gauss(vec![hidden, d]),
                b_fc2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(ToyModel {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNormParams::unit(d),
        })
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".to_string()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {} out of vocabulary (size {})",
                t, self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn validate_hook(&self, hook: &SteerHook) -> Result<()> {
        if hook.layer >= self.config.n_layers {
            return Err(Error::Parameter(format!(
                "hook layer {} out of range for {} layers",
                hook.layer, self.config.n_layers
            )));
        }
        if hook.vector.shape() != [self.config.d_model] {
            return Err(Error::Dimension(format!(
                "hook vector shape {:?} vs model d_model {}",
                hook.vector.shape(),
                self.config.d_model
            )));
        }
        if !hook.multiplier.is_finite() {
            return Err(Error::Parameter(format!(
                "hook multiplier must be finite, got {}",
                hook.multiplier
            )));
        }
        hook.vector.check_finite("hook vector")?;
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.validate_tokens(tokens)?;
        Ok(self.forward_inner(tokens, None))
    }

    pub fn forward_steered(&self, tokens: &[u32], hook: &SteerHook) -> Result<ForwardTrace> {
        self.validate_tokens(tokens)?;
        self.validate_hook(hook)?;
        Ok(self.forward_inner(tokens, Some(hook)))
    }

    /// Token + positional embedding for a sequence: `[T, d_model]`.
    fn embed(&self, tokens: &[u32]) -> Tensor {
        let d = self.config.d_model;
        let mut x = Tensor::zeros(vec![tokens.len(), d]);
        for (t, &tok) in tokens.iter().enumerate() {
            let te = self.tok_emb.row(tok as usize);
            let pe = self.pos_emb.row(t);
            let row = x.row_mut(t);
            for i in 0..d {
                row[i] = te[i] + pe[i];
            }
        }
        x
    }

    fn apply_ln(&self, x: &Tensor, ln: &LayerNormParams) -> Tensor {
        let (t_len, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Tensor::zeros(vec![t_len, d]);
        for t in 0..t_len {
            let mut row = vec![0.0; d];
            layer_norm_slice(x.row(t), ln.gain.data(), ln.bias.data(), LN_EPS, &mut row);
            out.row_mut(t).copy_from_slice(&row);
        }
        out
    }

    /// Causal multi-head self-attention with all intermediates retained
    /// (the trainer backpropagates through the same pass).
    fn attention(&self, block: &Block, x_ln: &Tensor) -> AttnCache {
        let (t_len, d) = (x_ln.shape()[0], x_ln.shape()[1]);
        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = matmul(x_ln, &block.w_q).expect("shapes fixed by construction");
        let k = matmul(x_ln, &block.w_k).expect("shapes fixed by construction");
        let v = matmul(x_ln, &block.w_v).expect("shapes fixed by construction");

        let mut ctx = Tensor::zeros(vec![t_len, d]);
        let mut weights = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * dh;
            let mut w_head = Tensor::zeros(vec![t_len, t_len]);
            for t in 0..t_len {
                let q_t = &q.row(t)[off..off + dh];
                let mut scores = Vec::with_capacity(t + 1);
                for s in 0..=t {
                    let k_s = &k.row(s)[off..off + dh];
                    let dot: f64 = q_t.iter().zip(k_s).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                let probs = softmax_slice(&scores, 1.0).expect("temperature 1 is valid");
                let ctx_row = ctx.row_mut(t);
                for (s, &p) in probs.iter().enumerate() {
                    w_head.row_mut(t)[s] = p;
                    let v_s = &v.row(s)[off..off + dh];
                    for i in 0..dh {
                        ctx_row[off + i] += p * v_s[i];
                    }
                }
            }
            weights.push(w_head);
        }
        let out = matmul(&ctx, &block.w_o).expect("shapes fixed by construction");
        AttnCache {
            q,
            k,
            v,
            weights,
            ctx,
            out,
        }
    }

    fn mlp(&self, block: &Block, x_ln: &Tensor) -> MlpCache {
        let mut h1 = matmul(x_ln, &block.w_fc1).expect("shapes fixed by construction");
        let hidden = block.b_fc1.len();
        for t in 0..h1.shape()[0] {
            let row = h1.row_mut(t);
            for i in 0..hidden {
                row[i] = (row[i] + block.b_fc1.data()[i]).max(0.0);
            }
        }
        let mut out = matmul(&h1, &block.w_fc2).expect("shapes fixed by construction");
        for t in 0..out.shape()[0] {
            let row = out.row_mut(t);
            for (i, &b) in block.b_fc2.data().iter().enumerate() {
                row[i] += b;
            }
        }
        MlpCache { h1, out }
    }

    fn forward_inner(&self, tokens: &[u32], hook: Option<&SteerHook>) -> ForwardTrace {
        let mut x = self.embed(tokens);
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::with_capacity(self.config.n_layers);

        for (l, block) in self.blocks.iter().enumerate() {
            let attn = self.attention(block, &self.apply_ln(&x, &block.ln1));
            x = x.add(&attn.out).expect("residual shapes agree");
            let mlp = self.mlp(block, &self.apply_ln(&x, &block.ln2));
            x = x.add(&mlp.out).expect("residual shapes agree");
            let attn_weights = attn.weights;
            if let Some(h) = hook {
                if h.layer == l {
                    for t in 0..x.shape()[0] {
                        let row = x.row_mut(t);
                        for (i, &vi) in h.vector.data().iter().enumerate() {
                            row[i] += h.multiplier * vi;
                        }
                    }
                }
            }
            hidden.push(x.clone());
            attention.push(attn_weights);
        }

        let final_ln = self.apply_ln(&x, &self.ln_f);
        let unembed = transpose(&self.tok_emb).expect("tok_emb is 2-D");
        let logits = matmul(&final_ln, &unembed).expect("shapes fixed by construction");
        ForwardTrace {
            hidden,
            attention,
            logits,
        }
    }

    /// Autoregressive sampling. Greedy at `temperature == 0` (ties go to
    /// the lower token id), otherwise temperature sampling seeded by `seed`.
    /// Stops at EOS, `max_new` tokens, or the positional-embedding limit.
    /// Returns only the newly generated tokens (including a final EOS).
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        temperature: f64,
        hook: Option<&SteerHook>,
        seed: u64,
    ) -> Result<Vec<u32>> {
        self.validate_tokens(prompt)?;
        if let Some(h) = hook {
            self.validate_hook(h)?;
        }
        if max_new == 0 {
            return Err(Error::Parameter("max_new must be at least 1".to_string()));
        }
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be finite and nonnegative, got {temperature}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let mut seq = prompt.to_vec();
        let mut new_tokens = Vec::new();
        while new_tokens.len() < max_new && seq.len() < self.config.max_seq {
            let trace = self.forward_inner(&seq, hook);
            let last = trace.logits.row(trace.logits.shape()[0] - 1);
            let next = if temperature == 0.0 {
                argmax_lowest_id(last)
            } else {
                let probs = softmax_slice(last, temperature)?;
                sample_categorical(&mut rng, &probs)
            };
            let next = next as u32;
            seq.push(next);
            new_tokens.push(next);
            if next == EOS_TOKEN {
                break;
            }
        }
        Ok(new_tokens)
    }

    /// Quick structural checksum over all weights (sum of bits-hashed f64);
    /// useful for determinism checks.
    pub fn weight_checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut absorb = |t: &Tensor| {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        };
        absorb(&self.tok_emb);
        absorb(&self.pos_emb);
        for b in &self.blocks {
            for t in [
                &b.ln1.gain, &b.ln1.bias, &b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.ln2.gain,
                &b.ln2.bias, &b.w_fc1, &b.b_fc1, &b.w_fc2, &b.b_fc2,
            ] {
                absorb(t);
            }
        }
        absorb(&self.ln_f.gain);
        absorb(&self.ln_f.bias);
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
    }
}

fn argmax_lowest_id(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(rng: &mut crate::rng::Rng, probs: &[f64]) -> usize {
    use rand::Rng;
    let mut dart: f64 = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Mean attention mass assigned to `span` key positions, per layer,
/// averaged over heads and query positions. Queries are the positions
/// strictly after the span; when the span reaches the end of the sequence
/// every position is used (each row then sums to 1 over the span).
pub fn attention_to_span(trace: &ForwardTrace, span: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let t_len = trace.logits.shape()[0];
    if span.start >= span.end {
        return Err(Error::Parameter(format!(
            "empty span {}..{}",
            span.start, span.end
        )));
    }
    if span.end > t_len {
        return Err(Error::Parameter(format!(
            "span {}..{} outside sequence of length {t_len}",
            span.start, span.end
        )));
    }
    let queries: Vec<usize> = if span.end < t_len {
        (span.end..t_len).collect()
    } else {
        (0..t_len).collect()
    };
    let mut out = Vec::with_capacity(trace.attention.len());
    for heads in &trace.attention {
        let mut total = 0.0;
        let mut count = 0.0;
        for w in heads {
            for &q in &queries {
                let row = w.row(q);
                total += row[span.clone()].iter().sum::<f64>();
                count += 1.0;
            }
        }
        out.push(total / count);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    format: String,
    version: u32,
    model: ToyModel,
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<()> {
    let checkpoint = ModelCheckpoint {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_FORMAT_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string(&checkpoint)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    let json = std::fs::read_to_string(path)?;
    let checkpoint: ModelCheckpoint = serde_json::from_str(&json)?;
    if checkpoint.format != MODEL_FORMAT {
        return Err(Error::Format(format!(
            "{} holds a '{}' artifact, expected '{MODEL_FORMAT}'",
            path.display(),
            checkpoint.format
        )));
    }
    if checkpoint.version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} unsupported (expected {MODEL_FORMAT_VERSION}); \
             regenerate the checkpoint with this build",
            path.display(),
            checkpoint.version
        )));
    }
    checkpoint.model.config.validate()?;
    Ok(checkpoint.model)
}
