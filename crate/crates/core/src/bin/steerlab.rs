//! Command-line front end: corpus synthesis, training, vector building,
//! steered generation, sweeps, and the full resumable pipeline.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use steerlab_core::corpus::{generate_behavior_corpus, length_contrast_pair, BehaviorCorpus};
use steerlab_core::error::{Error, Result};
use steerlab_core::eval::{
    behavior_score, boundary_sweep, fluency_ngram, length_steering_eval,
    prompt_position_ablation, BehaviorLexicon,
};
use steerlab_core::pipeline::{
    build_vector, file_sha256, load_activations, pipeline_eval_prompts, pipeline_probe_prompt,
    run_pipeline, stage_dump_activations, stage_gen_corpus, stage_train_sae, stage_train_toy,
    verify_artifact, RunConfig, RunPaths, VectorInputs, VectorMethod, OUT_DIR_ENV,
};
use steerlab_core::rng::split_seed;
use steerlab_core::sae::{gradient_check, load_sae, SaeParams, SaeTrainConfig};
use steerlab_core::steering::{match_magnitude, SteeringVector};
use steerlab_core::tensor::Tensor;
use steerlab_core::toymodel::{load_model, ToyModel, BOS_TOKEN};

#[derive(Parser)]
#[command(name = "steerlab")]
#[command(about = "Toy transformer + sparse-autoencoder steering workbench")]
struct Cli {
    /// TOML run configuration; omitted keys use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: $STEERLAB_OUT_DIR or ./runs).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a behavior corpus and its lexicon from the grammar config.
    GenCorpus,
    /// Train the toy transformer on the corpus.
    TrainToy,
    /// Dump residual-stream activations at the configured layer.
    DumpActivations,
    /// Train the JumpReLU sparse autoencoder on dumped activations.
    TrainSae,
    /// Finite-difference check of the SAE trainer's gradients.
    GradCheck(GradCheckArgs),
    /// Build a steering vector (caa | sta | axbench | prompt-caa | prompt-sta).
    BuildVector(BuildVectorArgs),
    /// Generate with a steering vector applied.
    Steer(SteerArgs),
    /// Multiplier boundary sweep with report CSV/JSON.
    Sweep,
    /// Behavior score with a prompt at input-prefix/suffix and output-prefix.
    PromptAblation(PromptArgs),
    /// Reasoning-length steering from a single long/short contrast pair.
    LengthSweep(LengthSweepArgs),
    /// Run every stage, skipping artifacts that are already current.
    Pipeline,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random instances to check.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct BuildVectorArgs {
    /// caa | sta | axbench | prompt-caa | prompt-sta
    #[arg(long)]
    method: String,
    /// Comma-separated token ids (prompt methods only).
    #[arg(long)]
    prompt: Option<String>,
    /// Output path (default: <out-dir>/vector.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SteerArgs {
    /// Steering vector file (default: <out-dir>/vector.json).
    #[arg(long)]
    vector: Option<PathBuf>,
    /// Steering multiplier (default: the config's steer.lambda, 1.0).
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated prompt token ids; BOS is prepended when missing.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 24)]
    max_new: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    gen_seed: u64,
}

#[derive(Args)]
struct PromptArgs {
    /// Comma-separated token ids.
    #[arg(long)]
    prompt: String,
}

#[derive(Args)]
struct LengthSweepArgs {
    /// Comma-separated multipliers (default: -2,0,2).
    #[arg(long)]
    lambdas: Option<String>,
}

fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Input(format!("bad token id '{s}'")))
        })
        .collect()
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("bad multiplier '{s}'")))
        })
        .collect()
}

fn require_exists(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Input(format!(
            "missing {hint}: {} (run the producing stage first)",
            path.display()
        )));
    }
    Ok(())
}

fn load_model_checked(paths: &RunPaths) -> Result<ToyModel> {
    require_exists(&paths.model, "model checkpoint")?;
    verify_artifact(&paths.model)?;
    load_model(&paths.model)
}

fn load_sae_checked(paths: &RunPaths) -> Result<SaeParams> {
    require_exists(&paths.sae, "SAE checkpoint")?;
    verify_artifact(&paths.sae)?;
    load_sae(&paths.sae)
}

fn load_corpus_checked(paths: &RunPaths, config: &RunConfig) -> Result<BehaviorCorpus> {
    require_exists(&paths.corpus, "behavior corpus")?;
    BehaviorCorpus::load_jsonl(&paths.corpus, &config.corpus.behavior_name)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out_dir = cli
        .out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out_dir)?;
    let paths = RunPaths::new(&out_dir);

    match cli.command {
        Command::GenCorpus => {
            let skipped = stage_gen_corpus(
                &config.corpus,
                split_seed(config.seed, "corpus"),
                &paths.corpus,
                &paths.lexicon,
            )?;
            let (corpus, _) =
                generate_behavior_corpus(&config.corpus, split_seed(config.seed, "corpus"))?;
            println!(
                "{} {} ({} items, lexicon {})",
                if skipped { "current" } else { "wrote" },
                paths.corpus.display(),
                corpus.items.len(),
                paths.lexicon.display()
            );
        }
        Command::TrainToy => {
            require_exists(&paths.corpus, "behavior corpus")?;
            let model_config = config.model.to_config(split_seed(config.seed, "model"));
            let skipped =
                stage_train_toy(&model_config, &config.train, &paths.corpus, &paths.model)?;
            println!(
                "{} {}",
                if skipped { "current" } else { "wrote" },
                paths.model.display()
            );
        }
        Command::DumpActivations => {
            require_exists(&paths.model, "model checkpoint")?;
            require_exists(&paths.corpus, "behavior corpus")?;
            let skipped = stage_dump_activations(
                &paths.model,
                &paths.corpus,
                config.layer,
                &paths.activations,
            )?;
            let (_, rows) = load_activations(&paths.activations)?;
            println!(
                "{} {} ({} rows x {})",
                if skipped { "current" } else { "wrote" },
                paths.activations.display(),
                rows.shape()[0],
                rows.shape()[1]
            );
        }
        Command::TrainSae => {
            require_exists(&paths.activations, "activation dump")?;
            let sae_config = config.sae.to_config(split_seed(config.seed, "sae"));
            let skipped = stage_train_sae(&sae_config, &paths.activations, &paths.sae)?;
            println!(
                "{} {}",
                if skipped { "current" } else { "wrote" },
                paths.sae.display()
            );
        }
        Command::GradCheck(args) => {
            use steerlab_core::rng::{gaussian_fill, rng_from_seed};
            let mut worst = 0.0f64;
            for seed in 0..args.seeds {
                let d = 4 + (seed as usize % 5); // 4..=8
                let m = 8 + ((seed as usize * 7) % 25); // 8..=32
                let mut rng = rng_from_seed(split_seed(config.seed, &format!("gradcheck-{seed}")));
                let mut h = Tensor::zeros(vec![6, d]);
                gaussian_fill(&mut rng, 1.0, h.data_mut());
                let mut params = steerlab_core::sae::train_sae(
                    &h,
                    &SaeTrainConfig {
                        m_latent: m,
                        steps: 0,
                        ..SaeTrainConfig::default()
                    },
                )?
                .0;
                gaussian_fill(&mut rng, 0.3, params.b_enc.data_mut());
                for t in params.theta.data_mut() {
                    *t = 0.3;
                }
                let check_config = SaeTrainConfig {
                    m_latent: m,
                    gamma: 0.05,
                    ..SaeTrainConfig::default()
                };
                let err = gradient_check(&params, &h, &check_config)?;
                worst = worst.max(err);
                println!("instance {seed}: D={d} M={m} max relative error {err:.3e}");
            }
            println!("worst over {} instances: {worst:.3e}", args.seeds);
            if worst > args.tolerance {
                return Err(Error::Input(format!(
                    "gradient check failed: {worst:.3e} > {:.1e}",
                    args.tolerance
                )));
            }
        }
        Command::BuildVector(args) => {
            let method: VectorMethod = args.method.parse()?;
            let model = load_model_checked(&paths)?;
            let needs_sae = matches!(
                method,
                VectorMethod::Sta | VectorMethod::Axbench | VectorMethod::PromptSta
            );
            let sae = if needs_sae {
                Some(load_sae_checked(&paths)?)
            } else {
                None
            };
            let needs_corpus = matches!(
                method,
                VectorMethod::Caa | VectorMethod::Sta | VectorMethod::Axbench
            );
            let corpus = if needs_corpus {
                Some(load_corpus_checked(&paths, &config)?)
            } else {
                None
            };
            let prompt = args.prompt.as_deref().map(parse_tokens).transpose()?;
            if matches!(method, VectorMethod::PromptCaa | VectorMethod::PromptSta)
                && prompt.is_none()
            {
                return Err(Error::Config(
                    "prompt methods need --prompt <ids>".to_string(),
                ));
            }
            let mut options = config.vector.clone();
            options.method = method;
            let built = build_vector(&VectorInputs {
                model: &model,
                sae: sae.as_ref(),
                corpus: corpus.as_ref(),
                prompt: prompt.as_deref(),
                layer: config.layer,
                options: &options,
            })?;
            let vector = if options.match_to_caa && method != VectorMethod::Caa {
                let reference_corpus = match corpus {
                    Some(ref c) => c.clone(),
                    None => load_corpus_checked(&paths, &config)?,
                };
                let caa =
                    steerlab_core::steering::caa_vector(&model, &reference_corpus, config.layer)?;
                match_magnitude(&built, &caa)?
            } else {
                built
            };
            let out = args.out.unwrap_or_else(|| paths.vector.clone());
            vector.save(&out)?;
            steerlab_core::pipeline::write_manifest(
                &out,
                "steering-vector",
                steerlab_core::steering::VECTOR_FORMAT_VERSION,
                serde_json::json!({
                    "method": args.method,
                    "layer": config.layer,
                    "cli": true,
                }),
            )?;
            let active = vector.values.iter().filter(|v| **v != 0.0).count();
            println!("wrote {}", out.display());
            println!(
                "method {} layer {} norm {:.6} nonzero_components {active}",
                args.method, vector.layer, vector.norm
            );
            if let (Some(alpha), Some(beta)) = (vector.alpha, vector.beta) {
                println!(
                    "alpha {alpha:.6} beta {beta:.6} top_fraction {:?}",
                    vector.top_fraction
                );
            }
        }
        Command::Steer(args) => {
            let model = load_model_checked(&paths)?;
            let vector_path = args.vector.unwrap_or_else(|| paths.vector.clone());
            require_exists(&vector_path, "steering vector")?;
            let vector = SteeringVector::load(&vector_path)?;
            if vector.dim != model.config.d_model {
                return Err(Error::Config(format!(
                    "vector dim {} vs model d_model {}",
                    vector.dim, model.config.d_model
                )));
            }
            let mut prompt = match args.prompt.as_deref() {
                Some(text) => parse_tokens(text)?,
                None => pipeline_eval_prompts(&config)?
                    .into_iter()
                    .next()
                    .expect("config yields at least one prompt"),
            };
            if prompt.first() != Some(&BOS_TOKEN) {
                prompt.insert(0, BOS_TOKEN);
            }
            let lambda = args.lambda.unwrap_or(config.steer.lambda);
            let hook = vector.hook(lambda);
            let out = model.generate(
                &prompt,
                args.max_new,
                args.temperature,
                Some(&hook),
                args.gen_seed,
            )?;
            println!("prompt: {prompt:?}");
            println!("generated: {out:?}");
            let lexicon = BehaviorLexicon::load(&paths.lexicon)?;
            let score = behavior_score(&model, &[prompt], Some(&hook), &lexicon)?;
            println!("behavior_score {score:.4} (lambda {lambda})");
            if out.len() >= 2 {
                println!("fluency(distinct-2) {:.4}", fluency_ngram(&out, 2)?);
            }
        }
        Command::Sweep => {
            let model = load_model_checked(&paths)?;
            require_exists(&paths.vector, "steering vector")?;
            let vector = SteeringVector::load(&paths.vector)?;
            let lexicon = BehaviorLexicon::load(&paths.lexicon)?;
            let eval_prompts = pipeline_eval_prompts(&config)?;
            let probe = pipeline_probe_prompt(&config, &eval_prompts)?;
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
            println!(
                "wrote {} and {}",
                paths.sweep_csv.display(),
                paths.sweep_json.display()
            );
            for row in &report.rows {
                println!(
                    "lambda {:+.1}: score {:.3} fluency {:.3} mean_length {:.2}",
                    row.lambda,
                    row.behavior_score.unwrap_or(f64::NAN),
                    row.fluency,
                    row.mean_length
                );
            }
        }
        Command::PromptAblation(args) => {
            let model = load_model_checked(&paths)?;
            let lexicon = BehaviorLexicon::load(&paths.lexicon)?;
            let prompt = parse_tokens(&args.prompt)?;
            let eval_prompts = pipeline_eval_prompts(&config)?;
            let scores = prompt_position_ablation(&model, &prompt, &eval_prompts, &lexicon)?;
            for (position, score) in scores {
                println!("{position:?}: behavior_score {score:.4}");
            }
        }
        Command::LengthSweep(args) => {
            let model = load_model_checked(&paths)?;
            let corpus = load_corpus_checked(&paths, &config)?;
            let (question, long, short) = length_contrast_pair(&corpus)?;
            let lambdas = match args.lambdas.as_deref() {
                Some(text) => parse_lambdas(text)?,
                None => vec![-2.0, 0.0, 2.0],
            };
            let eval_prompts = pipeline_eval_prompts(&config)?;
            let report = length_steering_eval(
                &model,
                &question,
                &long,
                &short,
                config.layer,
                &lambdas,
                &eval_prompts,
                &config.eval.gen_config(config.seed),
            )?;
            let csv_path = out_dir.join("length_sweep.csv");
            report.save_csv(&csv_path)?;
            println!("wrote {}", csv_path.display());
            for row in &report.rows {
                println!(
                    "lambda {:+.1}: mean_length {:.2} fluency {:.3}",
                    row.lambda, row.mean_length, row.fluency
                );
            }
        }
        Command::Pipeline => {
            let outcome = run_pipeline(&config, &out_dir)?;
            for stage in &outcome.stages {
                println!(
                    "{:<18} {} {}",
                    stage.name,
                    if stage.skipped { "skipped" } else { "rebuilt" },
                    stage.artifact.display()
                );
            }
            println!("report: {}", outcome.paths.sweep_csv.display());
            for row in &outcome.report.rows {
                println!(
                    "lambda {:+.1}: score {:.3} fluency {:.3} mean_length {:.2}",
                    row.lambda,
                    row.behavior_score.unwrap_or(f64::NAN),
                    row.fluency,
                    row.mean_length
                );
            }
            println!("model hash {}", file_sha256(&outcome.paths.model)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
