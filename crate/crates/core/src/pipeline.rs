//! End-to-end pipeline: corpus -> toy model -> activation dump -> SAE ->
//! steering vector -> boundary sweep, with per-artifact manifests, content
//! hashing, and stage skipping on rerun.
//!
//! Every artifact gets a sibling `<name>.manifest.json` recording its type,
//! format version, creation parameters (including input hashes), and the
//! sha-256 of the artifact bytes. A stage reruns when its manifest is
//! missing, its parameters changed, an input hash changed, or the artifact
//! bytes no longer match the recorded hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_behavior_corpus, generate_eval_prompts, positive_demonstration, BehaviorCorpus,
    GrammarSpec,
};
use crate::error::{Error, Result};
use crate::eval::{boundary_sweep, BehaviorLexicon, GenConfig, SweepReport};
use crate::rng::split_seed;
use crate::sae::{load_sae, save_sae, train_sae, SaeOptimizer, SaeParams, SaeTrainConfig};
use crate::steering::{
    axbench_vector, build_sta_vector, caa_vector, collect_atom_stats, match_magnitude,
    prompt_to_vector, thresholds_from_fraction, PromptMethod, PromptStaOptions, SelectionMode,
    SteeringVector,
};
use crate::tensor::Tensor;
use crate::toymodel::{load_model, save_model, train_toy, ToyModel, ToyModelConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const ACTIVATIONS_FORMAT: &str = "activations";
pub const ACTIVATIONS_FORMAT_VERSION: u32 = 1;

/// Environment variable naming the default output-directory root.
pub const OUT_DIR_ENV: &str = "STEERLAB_OUT_DIR";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub artifact_type: String,
    pub format_version: u32,
    /// Creation parameters, including `inputs`: name -> content hash.
    pub params: serde_json::Value,
    pub content_hash: String,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}

/// Hash the artifact and record its manifest next to it.
pub fn write_manifest(
    artifact: &Path,
    artifact_type: &str,
    format_version: u32,
    params: serde_json::Value,
) -> Result<Manifest> {
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        artifact_type: artifact_type.to_string(),
        format_version,
        params,
        content_hash: file_sha256(artifact)?,
    };
    std::fs::write(manifest_path(artifact), serde_json::to_string(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(artifact: &Path) -> Result<Manifest> {
    let path = manifest_path(artifact);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if manifest.manifest_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: manifest version {} unsupported (expected {MANIFEST_VERSION}); \
             regenerate the artifact with this build",
            path.display(),
            manifest.manifest_version
        )));
    }
    Ok(manifest)
}

/// Load the manifest and check the artifact bytes against its recorded
/// hash. The error names the corrupt file.
pub fn verify_artifact(artifact: &Path) -> Result<Manifest> {
    let manifest = load_manifest(artifact)?;
    let actual = file_sha256(artifact)?;
    if actual != manifest.content_hash {
        return Err(Error::Format(format!(
            "hash mismatch for {}: manifest records {}, file hashes to {actual}",
            artifact.display(),
            manifest.content_hash
        )));
    }
    Ok(manifest)
}

/// A stage may skip when the artifact exists, its manifest parameters equal
/// the requested ones, and the artifact bytes still match the hash.
fn stage_is_current(artifact: &Path, artifact_type: &str, params: &serde_json::Value) -> bool {
    if !artifact.exists() {
        return false;
    }
    match verify_artifact(artifact) {
        Ok(manifest) => manifest.artifact_type == artifact_type && &manifest.params == params,
        Err(_) => false,
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ToyModelConfig::default();
        ModelSection {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_seq: c.max_seq,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1500,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeSection {
    pub m_latent: usize,
    pub gamma: f64,
    pub bandwidth: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: SaeOptimizer,
}

impl Default for SaeSection {
    fn default() -> Self {
        let c = SaeTrainConfig::default();
        SaeSection {
            m_latent: c.m_latent,
            gamma: c.gamma,
            bandwidth: c.bandwidth,
            lr: c.lr,
            steps: c.steps,
            batch_size: c.batch_size,
            optimizer: c.optimizer,
        }
    }
}

impl SaeSection {
    pub fn to_config(&self, seed: u64) -> SaeTrainConfig {
        SaeTrainConfig {
            m_latent: self.m_latent,
            gamma: self.gamma,
            bandwidth: self.bandwidth,
            lr: self.lr,
            steps: self.steps,
            seed,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorMethod {
    Caa,
    Sta,
    Axbench,
    PromptCaa,
    PromptSta,
}

impl std::str::FromStr for VectorMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caa" => Ok(VectorMethod::Caa),
            "sta" => Ok(VectorMethod::Sta),
            "axbench" => Ok(VectorMethod::Axbench),
            "prompt-caa" => Ok(VectorMethod::PromptCaa),
            "prompt-sta" => Ok(VectorMethod::PromptSta),
            other => Err(Error::Parameter(format!(
                "unknown vector method '{other}' (expected caa|sta|axbench|prompt-caa|prompt-sta)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorSection {
    pub method: VectorMethod,
    pub top_fraction: f64,
    pub include_decoder_bias: bool,
    pub mode: SelectionMode,
    /// Rescale the produced vector to the CAA reference norm.
    pub match_to_caa: bool,
}

impl Default for VectorSection {
    fn default() -> Self {
        VectorSection {
            method: VectorMethod::Sta,
            // Cutoffs sit at the top 35% rank of each contrast statistic.
            top_fraction: 0.35,
            include_decoder_bias: true,
            mode: SelectionMode::Full,
            match_to_caa: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_eval_prompts: usize,
    pub lambdas: Vec<f64>,
    pub max_new: usize,
    pub temperature: f64,
    pub n_gen_seeds: usize,
    pub top_k: usize,
    /// Answer tokens appended to the probe prompt so the vanilla model is
    /// confident there.
    pub probe_answer_tokens: usize,
    /// Length of the positive demonstration used for prompt-to-vector runs.
    pub demo_prompt_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_eval_prompts: 8,
            lambdas: vec![-10.0, -8.0, -2.0, -1.0, 0.0, 1.0, 2.0, 10.0],
            max_new: 24,
            temperature: 0.8,
            n_gen_seeds: 5,
            top_k: 5,
            probe_answer_tokens: 2,
            demo_prompt_len: 12,
        }
    }
}

impl EvalSection {
    pub fn gen_config(&self, root_seed: u64) -> GenConfig {
        GenConfig {
            max_new: self.max_new,
            temperature: self.temperature,
            seeds: (0..self.n_gen_seeds as u64)
                .map(|i| split_seed(root_seed, &format!("generation-{i}")))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerSection {
    /// Default steering multiplier.
    pub lambda: f64,
}

impl Default for SteerSection {
    fn default() -> Self {
        SteerSection { lambda: 1.0 }
    }
}

/// Whole-run configuration; a TOML file with any subset of these keys plus
/// CLI overrides.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Residual-stream layer read and steered (post-block).
    pub layer: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sae: SaeSection,
    pub corpus: GrammarSpec,
    pub vector: VectorSection,
    pub eval: EvalSection,
    pub steer: SteerSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.to_config(0).validate()?;
        self.sae.to_config(0).validate()?;
        if self.layer >= self.model.n_layers {
            return Err(Error::Config(format!(
                "layer {} out of range for {} layers",
                self.layer, self.model.n_layers
            )));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocab {} vs model vocab {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        if !(0.0 < self.vector.top_fraction && self.vector.top_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "top_fraction must lie in (0, 1], got {}",
                self.vector.top_fraction
            )));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

// ---------------------------------------------------------------------------
// Artifact paths and the activation dump format
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
    pub corpus: PathBuf,
    pub lexicon: PathBuf,
    pub model: PathBuf,
    pub activations: PathBuf,
    pub sae: PathBuf,
    pub vector: PathBuf,
    pub caa_reference: PathBuf,
    pub sweep_csv: PathBuf,
    pub sweep_json: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> RunPaths {
        RunPaths {
            out_dir: out_dir.to_path_buf(),
            corpus: out_dir.join("corpus.jsonl"),
            lexicon: out_dir.join("lexicon.json"),
            model: out_dir.join("model.json"),
            activations: out_dir.join("activations.json"),
            sae: out_dir.join("sae.json"),
            vector: out_dir.join("vector.json"),
            caa_reference: out_dir.join("caa_reference.json"),
            sweep_csv: out_dir.join("sweep.csv"),
            sweep_json: out_dir.join("sweep.json"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ActivationsFile {
    format: String,
    version: u32,
    layer: usize,
    d_model: usize,
    rows: Tensor,
}

pub fn save_activations(path: &Path, layer: usize, rows: &Tensor) -> Result<()> {
    let file = ActivationsFile {
        format: ACTIVATIONS_FORMAT.to_string(),
        version: ACTIVATIONS_FORMAT_VERSION,
        layer,
        d_model: rows.shape()[1],
        rows: rows.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_activations(path: &Path) -> Result<(usize, Tensor)> {
    let file: ActivationsFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format != ACTIVATIONS_FORMAT {
        return Err(Error::Format(format!(
            "{} holds a '{}' artifact, expected '{ACTIVATIONS_FORMAT}'",
            path.display(),
            file.format
        )));
    }
    if file.version != ACTIVATIONS_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} unsupported (expected {ACTIVATIONS_FORMAT_VERSION}); \
             regenerate the dump with this build",
            path.display(),
            file.version
        )));
    }
    file.rows.dims2()?;
    Ok((file.layer, file.rows))
}

/// Residual states at `layer` for every position of every sequence.
pub fn dump_layer_activations(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    layer: usize,
) -> Result<Tensor> {
    if layer >= model.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    if sequences.is_empty() {
        return Err(Error::Input("no sequences to dump".to_string()));
    }
    let d = model.config.d_model;
    let total: usize = sequences.iter().map(Vec::len).sum();
    let mut rows = Tensor::zeros(vec![total, d]);
    let mut cursor = 0;
    for seq in sequences {
        let trace = model.forward(seq)?;
        let hidden = &trace.hidden[layer];
        for t in 0..seq.len() {
            rows.row_mut(cursor).copy_from_slice(hidden.row(t));
            cursor += 1;
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageStatus {
    pub name: &'static str,
    pub skipped: bool,
    pub artifact: PathBuf,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub stages: Vec<StageStatus>,
    pub paths: RunPaths,
    pub report: SweepReport,
}

/// Exclusive ownership of an output directory for the duration of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(out_dir: &Path) -> Result<DirLock> {
        let path = out_dir.join(".steerlab.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (stale? remove {})",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn inputs_json(pairs: &[(&str, &str)]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (name, hash) in pairs {
        map.insert((*name).to_string(), serde_json::json!(hash));
    }
    serde_json::Value::Object(map)
}

pub fn stage_gen_corpus(
    spec: &GrammarSpec,
    seed: u64,
    corpus_path: &Path,
    lexicon_path: &Path,
) -> Result<bool> {
    let params = serde_json::json!({ "spec": spec, "seed": seed });
    if stage_is_current(corpus_path, "behavior-corpus", &params) && lexicon_path.exists() {
        return Ok(true);
    }
    let (corpus, lexicon) = generate_behavior_corpus(spec, seed)?;
    corpus.save_jsonl(corpus_path)?;
    lexicon.save(lexicon_path)?;
    write_manifest(corpus_path, "behavior-corpus", 1, params)?;
    Ok(false)
}

pub fn stage_train_toy(
    model_config: &ToyModelConfig,
    train: &TrainSection,
    corpus_path: &Path,
    model_path: &Path,
) -> Result<bool> {
    let corpus_hash = file_sha256(corpus_path)?;
    let params = serde_json::json!({
        "model": model_config,
        "train": train,
        "inputs": inputs_json(&[("corpus", &corpus_hash)]),
    });
    if stage_is_current(model_path, crate::toymodel::MODEL_FORMAT, &params) {
        return Ok(true);
    }
    let corpus = BehaviorCorpus::load_jsonl(corpus_path, "train")?;
    corpus.validate(model_config.max_seq)?;
    let mut model = ToyModel::init(model_config.clone())?;
    train_toy(
        &mut model,
        &corpus.training_sequences(),
        train.steps,
        train.lr,
    )?;
    save_model(&model, model_path)?;
    write_manifest(
        model_path,
        crate::toymodel::MODEL_FORMAT,
        crate::toymodel::MODEL_FORMAT_VERSION,
        params,
    )?;
    Ok(false)
}

pub fn stage_dump_activations(
    model_path: &Path,
    corpus_path: &Path,
    layer: usize,
    out_path: &Path,
) -> Result<bool> {
    let params = serde_json::json!({
        "layer": layer,
        "inputs": inputs_json(&[
            ("model", &file_sha256(model_path)?),
            ("corpus", &file_sha256(corpus_path)?),
        ]),
    });
    if stage_is_current(out_path, ACTIVATIONS_FORMAT, &params) {
        return Ok(true);
    }
    let model = load_model(model_path)?;
    let corpus = BehaviorCorpus::load_jsonl(corpus_path, "dump")?;
    let rows = dump_layer_activations(&model, &corpus.training_sequences(), layer)?;
    save_activations(out_path, layer, &rows)?;
    write_manifest(out_path, ACTIVATIONS_FORMAT, ACTIVATIONS_FORMAT_VERSION, params)?;
    Ok(false)
}

pub fn stage_train_sae(
    sae_config: &SaeTrainConfig,
    activations_path: &Path,
    out_path: &Path,
) -> Result<bool> {
    let params = serde_json::json!({
        "sae": sae_config,
        "inputs": inputs_json(&[("activations", &file_sha256(activations_path)?)]),
    });
    if stage_is_current(out_path, crate::sae::SAE_FORMAT, &params) {
        return Ok(true);
    }
    let (_, rows) = load_activations(activations_path)?;
    let (sae, _report) = train_sae(&rows, sae_config)?;
    save_sae(&sae, sae_config.gamma, sae_config.bandwidth, out_path)?;
    write_manifest(
        out_path,
        crate::sae::SAE_FORMAT,
        crate::sae::SAE_FORMAT_VERSION,
        params,
    )?;
    Ok(false)
}

/// Everything `build-vector` needs beyond the method itself.
pub struct VectorInputs<'a> {
    pub model: &'a ToyModel,
    pub sae: Option<&'a SaeParams>,
    pub corpus: Option<&'a BehaviorCorpus>,
    pub prompt: Option<&'a [u32]>,
    pub layer: usize,
    pub options: &'a VectorSection,
}

/// Build a steering vector by any supported method. Magnitude matching to
/// the CAA reference happens in `run_pipeline`, not here.
pub fn build_vector(inputs: &VectorInputs) -> Result<SteeringVector> {
    let VectorInputs {
        model,
        sae,
        corpus,
        prompt,
        layer,
        options,
    } = inputs;
    let need_sae = matches!(
        options.method,
        VectorMethod::Sta | VectorMethod::Axbench | VectorMethod::PromptSta
    );
    if need_sae && sae.is_none() {
        return Err(Error::Config(format!(
            "vector method {:?} needs an SAE checkpoint",
            options.method
        )));
    }
    match options.method {
        VectorMethod::Caa => {
            let corpus = corpus
                .ok_or_else(|| Error::Config("CAA needs a behavior corpus".to_string()))?;
            caa_vector(model, corpus, *layer)
        }
        VectorMethod::Sta => {
            let corpus = corpus
                .ok_or_else(|| Error::Config("STA needs a behavior corpus".to_string()))?;
            let sae = sae.expect("checked above");
            let stats = collect_atom_stats(model, sae, corpus, *layer)?;
            let thresholds = thresholds_from_fraction(&stats, options.top_fraction)?;
            build_sta_vector(
                &stats,
                sae,
                &thresholds,
                options.mode,
                options.include_decoder_bias,
                &corpus.content_hash(),
            )
        }
        VectorMethod::Axbench => {
            let corpus = corpus
                .ok_or_else(|| Error::Config("the all-atoms baseline needs a corpus".to_string()))?;
            let sae = sae.expect("checked above");
            let stats = collect_atom_stats(model, sae, corpus, *layer)?;
            axbench_vector(&stats, sae, options.include_decoder_bias, &corpus.content_hash())
        }
        VectorMethod::PromptCaa => {
            let prompt =
                prompt.ok_or_else(|| Error::Config("prompt-caa needs a prompt".to_string()))?;
            prompt_to_vector(
                model,
                prompt,
                PromptMethod::Caa,
                *sae,
                *layer,
                PromptStaOptions::default(),
            )
        }
        VectorMethod::PromptSta => {
            let prompt =
                prompt.ok_or_else(|| Error::Config("prompt-sta needs a prompt".to_string()))?;
            prompt_to_vector(
                model,
                prompt,
                PromptMethod::Sta,
                *sae,
                *layer,
                PromptStaOptions {
                    top_fraction: options.top_fraction,
                    include_decoder_bias: options.include_decoder_bias,
                },
            )
        }
    }
}

/// Fresh eval prompts (never in the training corpus) from the same grammar.
pub fn pipeline_eval_prompts(config: &RunConfig) -> Result<Vec<Vec<u32>>> {
    generate_eval_prompts(
        &config.corpus,
        split_seed(config.seed, "eval-prompts"),
        config.eval.n_eval_prompts,
    )
}

/// Probe prompt for token-distribution logging: an eval question extended
/// with a short run of positive-lexicon answer tokens, where the trained
/// model predicts confidently.
pub fn pipeline_probe_prompt(config: &RunConfig, eval_prompts: &[Vec<u32>]) -> Result<Vec<u32>> {
    let mut probe = eval_prompts
        .first()
        .ok_or_else(|| Error::Input("no eval prompts".to_string()))?
        .clone();
    let demo = positive_demonstration(
        &config.corpus,
        split_seed(config.seed, "probe"),
        config.eval.probe_answer_tokens,
    )?;
    probe.extend(demo);
    Ok(probe)
}

/// Run every stage, skipping the ones whose artifacts are current.
pub fn run_pipeline(config: &RunConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    let paths = RunPaths::new(out_dir);
    let mut stages = Vec::new();

    let corpus_seed = split_seed(config.seed, "corpus");
    let skipped = stage_gen_corpus(&config.corpus, corpus_seed, &paths.corpus, &paths.lexicon)?;
    stages.push(StageStatus {
        name: "gen-corpus",
        skipped,
        artifact: paths.corpus.clone(),
    });

    let model_config = config.model.to_config(split_seed(config.seed, "model"));
    let skipped = stage_train_toy(&model_config, &config.train, &paths.corpus, &paths.model)?;
    stages.push(StageStatus {
        name: "train-toy",
        skipped,
        artifact: paths.model.clone(),
    });

    let skipped =
        stage_dump_activations(&paths.model, &paths.corpus, config.layer, &paths.activations)?;
    stages.push(StageStatus {
        name: "dump-activations",
        skipped,
        artifact: paths.activations.clone(),
    });

    let sae_config = config.sae.to_config(split_seed(config.seed, "sae"));
    let skipped = stage_train_sae(&sae_config, &paths.activations, &paths.sae)?;
    stages.push(StageStatus {
        name: "train-sae",
        skipped,
        artifact: paths.sae.clone(),
    });

    // build-vector (+ CAA reference for magnitude matching)
    let vector_params = serde_json::json!({
        "vector": config.vector,
        "layer": config.layer,
        "inputs": inputs_json(&[
            ("model", &file_sha256(&paths.model)?),
            ("sae", &file_sha256(&paths.sae)?),
            ("corpus", &file_sha256(&paths.corpus)?),
        ]),
    });
    let skipped = if stage_is_current(&paths.vector, "steering-vector", &vector_params)
        && paths.caa_reference.exists()
    {
        true
    } else {
        let model = load_model(&paths.model)?;
        let sae = load_sae(&paths.sae)?;
        let corpus = BehaviorCorpus::load_jsonl(&paths.corpus, &config.corpus.behavior_name)?;
        let caa = caa_vector(&model, &corpus, config.layer)?;
        caa.save(&paths.caa_reference)?;
        write_manifest(
            &paths.caa_reference,
            "steering-vector",
            crate::steering::VECTOR_FORMAT_VERSION,
            serde_json::json!({ "method": "caa-reference", "layer": config.layer }),
        )?;
        let prompt = positive_demonstration(
            &config.corpus,
            split_seed(config.seed, "behavior-prompt"),
            config.eval.demo_prompt_len,
        )?;
        let built = build_vector(&VectorInputs {
            model: &model,
            sae: Some(&sae),
            corpus: Some(&corpus),
            prompt: Some(&prompt),
            layer: config.layer,
            options: &config.vector,
        })?;
        let vector = if config.vector.match_to_caa && config.vector.method != VectorMethod::Caa {
            match_magnitude(&built, &caa)?
        } else {
            built
        };
        vector.save(&paths.vector)?;
        write_manifest(
            &paths.vector,
            "steering-vector",
            crate::steering::VECTOR_FORMAT_VERSION,
            vector_params,
        )?;
        false
    };
    stages.push(StageStatus {
        name: "build-vector",
        skipped,
        artifact: paths.vector.clone(),
    });

    // sweep
    let sweep_params = serde_json::json!({
        "eval": config.eval,
        "seed": config.seed,
        "inputs": inputs_json(&[
            ("model", &file_sha256(&paths.model)?),
            ("vector", &file_sha256(&paths.vector)?),
        ]),
    });
    let (skipped, report) = if stage_is_current(&paths.sweep_csv, "sweep-report", &sweep_params)
        && paths.sweep_json.exists()
    {
        let report: SweepReport =
            serde_json::from_str(&std::fs::read_to_string(&paths.sweep_json)?)?;
        (true, report)
    } else {
        let model = load_model(&paths.model)?;
        let vector = SteeringVector::load(&paths.vector)?;
        let lexicon = BehaviorLexicon::load(&paths.lexicon)?;
        let eval_prompts = pipeline_eval_prompts(config)?;
        let probe = pipeline_probe_prompt(config, &eval_prompts)?;
        let report = boundary_sweep(
            &model,
            &vector,
            &config.eval.lambdas,
            &eval_prompts,
            &lexicon,
            &config.eval.gen_config(config.seed),
            &probe,
            config.eval.top_k,
        )?;
        report.save_csv(&paths.sweep_csv)?;
        report.save_json(&paths.sweep_json)?;
        write_manifest(&paths.sweep_csv, "sweep-report", 1, sweep_params)?;
        (false, report)
    };
    stages.push(StageStatus {
        name: "sweep",
        skipped,
        artifact: paths.sweep_csv.clone(),
    });

    Ok(PipelineOutcome {
        stages,
        paths,
        report,
    })
}

#[cfg(test)]
mod tests;
