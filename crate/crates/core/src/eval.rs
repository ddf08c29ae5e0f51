//! Evaluation harness: behavior scoring, distinct-n fluency, token
//! distributions, multiplier boundary sweeps, prompt-position ablation,
//! and reasoning-length steering.
//!
//! Behavior score is the toy stand-in for a defense/success-rate judge:
//! the probability mass the next-token distribution puts on the positive
//! lexicon, renormalized over positive plus negative tokens.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{BehaviorCorpus, CorpusItem};
use crate::error::{Error, Result};
use crate::rng::split_seed;
use crate::steering::{caa_vector, SteeringVector};
use crate::tensor::softmax;
use crate::tensor::Tensor;
use crate::toymodel::{SteerHook, ToyModel, BOS_TOKEN, EOS_TOKEN, SPACE_TOKEN};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Disjoint positive/negative token sets defining the scored behavior.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorLexicon {
    pub positive_tokens: BTreeSet<u32>,
    pub negative_tokens: BTreeSet<u32>,
}

impl BehaviorLexicon {
    pub fn new(positive_tokens: BTreeSet<u32>, negative_tokens: BTreeSet<u32>) -> Result<Self> {
        let lexicon = BehaviorLexicon {
            positive_tokens,
            negative_tokens,
        };
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_tokens.is_empty() || self.negative_tokens.is_empty() {
            return Err(Error::Input(
                "behavior lexicon sides must be nonempty".to_string(),
            ));
        }
        if self
            .positive_tokens
            .intersection(&self.negative_tokens)
            .next()
            .is_some()
        {
            return Err(Error::Input(
                "behavior lexicon sides must be disjoint".to_string(),
            ));
        }
        Ok(())
    }

    fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for &t in self.positive_tokens.iter().chain(&self.negative_tokens) {
            if t as usize >= vocab_size {
                return Err(Error::Config(format!(
                    "lexicon token {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lexicon: BehaviorLexicon = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lexicon.validate()?;
        Ok(lexicon)
    }
}

/// Positive mass renormalized over the positive and negative sets of a
/// full next-token distribution.
pub fn lexicon_mass_score(dist: &[f64], lexicon: &BehaviorLexicon) -> Result<f64> {
    lexicon.validate()?;
    lexicon.check_vocab(dist.len())?;
    let pos: f64 = lexicon.positive_tokens.iter().map(|&t| dist[t as usize]).sum();
    let neg: f64 = lexicon.negative_tokens.iter().map(|&t| dist[t as usize]).sum();
    Ok(pos / (pos + neg))
}

fn next_token_distribution(
    model: &ToyModel,
    prompt: &[u32],
    hook: Option<&SteerHook>,
) -> Result<Vec<f64>> {
    let trace = match hook {
        Some(h) => model.forward_steered(prompt, h)?,
        None => model.forward(prompt)?,
    };
    let last = trace.logits.row(trace.logits.shape()[0] - 1);
    Ok(softmax(&Tensor::from_vec(last.to_vec()), 1.0)?.into_data())
}

/// Mean lexicon-mass score of the next-token distribution over prompts.
pub fn behavior_score(
    model: &ToyModel,
    eval_prompts: &[Vec<u32>],
    hook: Option<&SteerHook>,
    lexicon: &BehaviorLexicon,
) -> Result<f64> {
    if eval_prompts.is_empty() {
        return Err(Error::Input("no evaluation prompts".to_string()));
    }
    lexicon.check_vocab(model.config.vocab_size)?;
    let mut total = 0.0;
    for prompt in eval_prompts {
        let dist = next_token_distribution(model, prompt, hook)?;
        total += lexicon_mass_score(&dist, lexicon)?;
    }
    Ok(total / eval_prompts.len() as f64)
}

/// Distinct-n ratio: unique n-grams over total n-grams.
pub fn fluency_ngram(sequence: &[u32], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("n must be at least 1".to_string()));
    }
    if sequence.len() < n {
        return Err(Error::Input(format!(
            "sequence of length {} has no {n}-grams",
            sequence.len()
        )));
    }
    let total = sequence.len() - n + 1;
    let distinct: BTreeSet<&[u32]> = sequence.windows(n).collect();
    Ok(distinct.len() as f64 / total as f64)
}

/// Top-k next-token probabilities, descending, ties broken by lower id.
pub fn topk_distribution(
    model: &ToyModel,
    prompt: &[u32],
    hook: Option<&SteerHook>,
    k: usize,
) -> Result<Vec<(u32, f64)>> {
    if k > model.config.vocab_size {
        return Err(Error::Parameter(format!(
            "k {} exceeds vocabulary size {}",
            k, model.config.vocab_size
        )));
    }
    let dist = next_token_distribution(model, prompt, hook)?;
    let mut indexed: Vec<(u32, f64)> = dist
        .iter()
        .enumerate()
        .map(|(i, &p)| (i as u32, p))
        .collect();
    indexed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    Ok(indexed)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Generation settings for sweep cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_new: usize,
    pub temperature: f64,
    /// One generation pass per seed; cells are reported per seed and
    /// aggregated as the mean.
    pub seeds: Vec<u64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_new: 24,
            temperature: 0.8,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// `None` marks the per-lambda aggregate row.
    pub seed: Option<u64>,
    pub behavior_score: Option<f64>,
    pub fluency: f64,
    pub mean_length: f64,
    /// `(token id, probability)` of the probe prompt, descending.
    pub top_tokens: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    /// One aggregate row per requested lambda, in request order.
    pub rows: Vec<SweepRow>,
    /// One row per lambda x seed, in request order.
    pub cells: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV with one row per lambda x seed plus aggregate rows
    /// (`seed` column says `mean`). Columns are fixed:
    /// `schema_version,lambda,seed,behavior_score,fluency,mean_length,top_tokens`.
    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "schema_version",
                "lambda",
                "seed",
                "behavior_score",
                "fluency",
                "mean_length",
                "top_tokens",
            ])
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        for row in self.cells.iter().chain(&self.rows) {
            let seed = row
                .seed
                .map_or_else(|| "mean".to_string(), |s| s.to_string());
            let score = row
                .behavior_score
                .map_or_else(String::new, |s| format!("{s:.6}"));
            let tokens = row
                .top_tokens
                .iter()
                .map(|(t, p)| format!("{t}:{p:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            writer
                .write_record([
                    REPORT_SCHEMA_VERSION.to_string(),
                    format!("{}", row.lambda),
                    seed,
                    score,
                    format!("{:.6}", row.fluency),
                    format!("{:.6}", row.mean_length),
                    tokens,
                ])
                .map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv utf8: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Continuation fluency; continuations too short for an n-gram count as
/// fully distinct.
fn continuation_fluency(tokens: &[u32], n: usize) -> f64 {
    if tokens.len() < n {
        1.0
    } else {
        fluency_ngram(tokens, n).expect("length checked")
    }
}

fn generated_length(tokens: &[u32]) -> f64 {
    match tokens.last() {
        Some(&t) if t == EOS_TOKEN => (tokens.len() - 1) as f64,
        _ => tokens.len() as f64,
    }
}

/// One sweep cell: mean fluency and generated length over prompts for a
/// single (lambda, seed).
fn sweep_cell(
    model: &ToyModel,
    hook: Option<&SteerHook>,
    prompts: &[Vec<u32>],
    gen: &GenConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut fluency_sum = 0.0;
    let mut length_sum = 0.0;
    for (i, prompt) in prompts.iter().enumerate() {
        let cell_seed = split_seed(seed, &format!("prompt-{i}"));
        let out = model.generate(prompt, gen.max_new, gen.temperature, hook, cell_seed)?;
        fluency_sum += continuation_fluency(&out, 2);
        length_sum += generated_length(&out);
    }
    let n = prompts.len() as f64;
    Ok((fluency_sum / n, length_sum / n))
}

/// Multiplier boundary sweep. For every requested lambda: behavior score,
/// mean distinct-2 fluency of sampled continuations (per seed), mean
/// generated length, and the probe prompt's top-k token distribution.
/// The lambda = 0 row equals a hook-free run exactly.
#[allow(clippy::too_many_arguments)]
pub fn boundary_sweep(
    model: &ToyModel,
    vector: &SteeringVector,
    lambdas: &[f64],
    eval_prompts: &[Vec<u32>],
    lexicon: &BehaviorLexicon,
    gen: &GenConfig,
    probe_prompt: &[u32],
    top_k: usize,
) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::Input("no lambdas requested".to_string()));
    }
    if vector.dim != model.config.d_model {
        return Err(Error::Config(format!(
            "vector dim {} vs model d_model {}",
            vector.dim, model.config.d_model
        )));
    }
    if gen.seeds.is_empty() {
        return Err(Error::Input("need at least one generation seed".to_string()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut cells = Vec::with_capacity(lambdas.len() * gen.seeds.len());
    for &lambda in lambdas {
        let hook = vector.hook(lambda);
        let score = behavior_score(model, eval_prompts, Some(&hook), lexicon)?;
        let top_tokens = topk_distribution(model, probe_prompt, Some(&hook), top_k)?;
        let mut fluency_acc = 0.0;
        let mut length_acc = 0.0;
        for &seed in &gen.seeds {
            let (fluency, mean_length) =
                sweep_cell(model, Some(&hook), eval_prompts, gen, seed)?;
            fluency_acc += fluency;
            length_acc += mean_length;
            cells.push(SweepRow {
                lambda,
                seed: Some(seed),
                behavior_score: Some(score),
                fluency,
                mean_length,
                top_tokens: top_tokens.clone(),
            });
        }
        let n_seeds = gen.seeds.len() as f64;
        rows.push(SweepRow {
            lambda,
            seed: None,
            behavior_score: Some(score),
            fluency: fluency_acc / n_seeds,
            mean_length: length_acc / n_seeds,
            top_tokens,
        });
    }
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        cells,
    })
}

/// Reasoning-length steering: build a CAA vector from a single
/// (long, short) contrast pair (long is positive), then record the mean
/// generated length under each multiplier.
#[allow(clippy::too_many_arguments)]
pub fn length_steering_eval(
    model: &ToyModel,
    question: &[u32],
    long_answer: &[u32],
    short_answer: &[u32],
    layer: usize,
    lambdas: &[f64],
    probe_prompts: &[Vec<u32>],
    gen: &GenConfig,
) -> Result<SweepReport> {
    if long_answer == short_answer {
        return Err(Error::Degenerate(
            "long and short contrast sequences are identical".to_string(),
        ));
    }
    let corpus = BehaviorCorpus {
        behavior_name: "length-contrast".to_string(),
        items: vec![CorpusItem {
            question: question.to_vec(),
            pos: long_answer.to_vec(),
            neg: short_answer.to_vec(),
        }],
    };
    let vector = caa_vector(model, &corpus, layer)?;
    if vector.norm == 0.0 {
        return Err(Error::Degenerate(
            "length contrast produced a zero vector".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut cells = Vec::with_capacity(lambdas.len() * gen.seeds.len());
    for &lambda in lambdas {
        let hook = vector.hook(lambda);
        let mut fluency_acc = 0.0;
        let mut length_acc = 0.0;
        for &seed in &gen.seeds {
            let (fluency, mean_length) =
                sweep_cell(model, Some(&hook), probe_prompts, gen, seed)?;
            fluency_acc += fluency;
            length_acc += mean_length;
            cells.push(SweepRow {
                lambda,
                seed: Some(seed),
                behavior_score: None,
                fluency,
                mean_length,
                top_tokens: Vec::new(),
            });
        }
        let n_seeds = gen.seeds.len() as f64;
        rows.push(SweepRow {
            lambda,
            seed: None,
            behavior_score: None,
            fluency: fluency_acc / n_seeds,
            mean_length: length_acc / n_seeds,
            top_tokens: Vec::new(),
        });
    }
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Prompt-position ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPosition {
    InputPrefix,
    InputSuffix,
    OutputPrefix,
}

pub const ALL_PROMPT_POSITIONS: [PromptPosition; 3] = [
    PromptPosition::InputPrefix,
    PromptPosition::InputSuffix,
    PromptPosition::OutputPrefix,
];

/// Concatenate `prompt` into an eval prompt at one of three positions.
/// Eval prompts are `[BOS] question SPACE`; the trailing separator marks
/// the input/output boundary, so input-suffix goes before it and
/// output-prefix after it.
fn place_prompt(eval_prompt: &[u32], prompt: &[u32], position: PromptPosition) -> Vec<u32> {
    let (bos, body) = match eval_prompt.split_first() {
        Some((&first, rest)) if first == BOS_TOKEN => (vec![first], rest),
        _ => (Vec::new(), eval_prompt),
    };
    let mut out = bos;
    match position {
        PromptPosition::InputPrefix => {
            out.extend_from_slice(prompt);
            out.extend_from_slice(body);
        }
        PromptPosition::InputSuffix => match body.split_last() {
            Some((&last, head)) if last == SPACE_TOKEN => {
                out.extend_from_slice(head);
                out.extend_from_slice(prompt);
                out.push(last);
            }
            _ => {
                out.extend_from_slice(body);
                out.extend_from_slice(prompt);
            }
        },
        PromptPosition::OutputPrefix => {
            out.extend_from_slice(body);
            out.extend_from_slice(prompt);
        }
    }
    out
}

/// Behavior score with the prompt concatenated at the input prefix, input
/// suffix, and output prefix positions.
pub fn prompt_position_ablation(
    model: &ToyModel,
    prompt: &[u32],
    eval_prompts: &[Vec<u32>],
    lexicon: &BehaviorLexicon,
) -> Result<Vec<(PromptPosition, f64)>> {
    let mut out = Vec::with_capacity(3);
    for position in ALL_PROMPT_POSITIONS {
        let placed: Vec<Vec<u32>> = eval_prompts
            .iter()
            .map(|p| place_prompt(p, prompt, position))
            .collect();
        for p in &placed {
            if p.len() > model.config.max_seq {
                return Err(Error::Input(format!(
                    "prompt placement {position:?} exceeds max_seq {}",
                    model.config.max_seq
                )));
            }
        }
        let score = behavior_score(model, &placed, None, lexicon)?;
        out.push((position, score));
    }
    Ok(out)
}
