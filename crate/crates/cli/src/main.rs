//! `apam`: contrastive pre-training plus meta-learned instance
//! reweighting for text classification, end to end from the shell.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric abort during training.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use apam_core::checkpoint;
use apam_core::data::{
    ingest, inject_uniform_noise, make_longtail, read_label_map, split_meta, synth, Dataset,
    DatasetSplit, NoiseSpec,
};
use apam_core::error::ApamError;
use apam_core::experiment::{
    evaluate, fine_tune, sensitivity_sweep, write_report, write_sweep_csv, ExperimentConfig,
    PipelineKind,
};
use apam_core::losses::{LossConfig, LossKind};
use apam_core::meta::{self, write_train_log, TrainConfig};
use apam_core::pretrain::{pretrain, write_loss_trace, PretrainConfig};
use apam_core::textmodel::{mix_seed, EncoderParams, ModelConfig, Vocab};

#[derive(Parser)]
#[command(name = "apam", version, about = "Train text classifiers that survive long tails and noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Token hash bucket count
    #[arg(long, default_value_t = 1 << 15)]
    buckets: usize,
    /// Embedding dimension
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    /// First fully connected layer width
    #[arg(long, default_value_t = 256)]
    fc1_dim: usize,
    /// Second fully connected layer width (sentence embedding size)
    #[arg(long, default_value_t = 128)]
    fc2_dim: usize,
}

impl ModelArgs {
    fn to_config(&self, num_classes: usize, dropout_p: f64) -> ModelConfig {
        ModelConfig {
            vocab: Vocab {
                hash_buckets: self.buckets,
                lowercase: true,
            },
            embed_dim: self.embed_dim,
            fc1_dim: self.fc1_dim,
            fc2_dim: self.fc2_dim,
            num_classes,
            dropout_p,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pre-training of the encoder on an unlabeled corpus
    Pretrain {
        /// Corpus file: JSONL with a text field, or plain text one sentence per line
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Contrastive temperature
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        /// Dropout probability used to build the two views
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Build a long-tailed, label-noised train/meta/test split
    Synth {
        /// Source JSONL with text and label fields; omitted = generate a
        /// synthetic cluster-vocabulary task
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output directory for train.jsonl, meta.jsonl, test.jsonl
        #[arg(long)]
        out: PathBuf,
        /// Target imbalance factor (largest class / smallest class)
        #[arg(long)]
        imbalance: f64,
        /// Uniform label noise ratio on the training set
        #[arg(long)]
        rho: f64,
        /// Fraction of training data held out as the clean meta set
        #[arg(long, default_value_t = 0.01)]
        meta_frac: f64,
        /// Draw the meta set class-balanced instead of class-proportional
        #[arg(long)]
        balanced_meta: bool,
        /// Fraction held out as the test set before imbalance and noise
        #[arg(long, default_value_t = 0.2)]
        test_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune a classifier on a prepared split
    Train {
        /// Split directory produced by `apam synth`
        #[arg(long)]
        data: PathBuf,
        /// One of ce_baseline, focal, class_balanced, mwn, simcse_only, apam
        #[arg(long)]
        pipeline: String,
        /// Pre-trained encoder checkpoint; required for simcse_only and apam
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory for model.apam, train_log.csv, report.json
        #[arg(long)]
        out: PathBuf,
        /// Virtual inner step size
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Weight net step size
        #[arg(long, default_value_t = 1e-3)]
        beta_meta: f64,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        /// Train batch size
        #[arg(long = "bs", default_value_t = 128)]
        batch_size: usize,
        /// Meta batch size
        #[arg(long = "meta-bs", default_value_t = 16)]
        meta_batch_size: usize,
        /// Poly loss epsilon
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        /// Learning rate of the model update
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dropout probability during fine-tuning
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a trained model on a labeled test file
    Eval {
        /// Model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Test JSONL with text and label fields
        #[arg(long)]
        test: PathBuf,
        /// Report output path
        #[arg(long)]
        out: PathBuf,
        /// label_map.json fixing the class id order; defaults to the one
        /// next to the test file when present
        #[arg(long)]
        label_map: Option<PathBuf>,
    },
    /// Noise-ratio sensitivity sweep over the comparison pipelines
    Sweep {
        /// JSON sweep specification
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated noise ratios, e.g. 0.1,0.2,0.3
        #[arg(long, value_delimiter = ',')]
        rhos: Vec<f64>,
    },
}

/// JSON body of `apam sweep --config`.
#[derive(Deserialize)]
struct SweepSpec {
    /// Split directory with a clean (un-noised) training set
    data: PathBuf,
    /// Output CSV path
    out: PathBuf,
    #[serde(default = "default_sweep_pipelines")]
    pipelines: Vec<String>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    pretrain: Option<PretrainConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn default_sweep_pipelines() -> Vec<String> {
    vec!["ce_baseline".into(), "mwn".into(), "apam".into()]
}

fn exit_code_for(err: &ApamError) -> u8 {
    match err {
        ApamError::Config(_) => 2,
        ApamError::Io(_) | ApamError::Ingest(_) | ApamError::Json(_) => 3,
        ApamError::Numeric { .. } => 4,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), ApamError> {
    match std::env::var("APAM_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                ApamError::Config(format!("APAM_THREADS must be a positive integer, got {v:?}"))
            })?;
            if n == 0 {
                return Err(ApamError::Config("APAM_THREADS must be >= 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| ApamError::Config(format!("thread pool setup failed: {e}")))
        }
    }
}

/// Read a corpus for pre-training: JSONL text fields when the file parses
/// as JSONL, otherwise one sentence per line.
fn read_corpus(path: &Path) -> Result<Vec<String>, ApamError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let ds = ingest(path)?;
        return Ok(ds.examples.into_iter().map(|e| e.text).collect());
    }
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(ApamError::Ingest(format!(
            "corpus {} contains no sentences",
            path.display()
        )));
    }
    Ok(lines)
}

fn run(cli: Cli) -> Result<(), ApamError> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain {
            corpus,
            out,
            epochs,
            tau,
            dropout,
            seed,
            batch_size,
            lr,
            model,
        } => {
            let sentences = read_corpus(&corpus)?;
            let cfg = PretrainConfig {
                batch_size,
                epochs,
                tau,
                lr,
                seed,
            };
            cfg.validate()?;
            let mut params =
                EncoderParams::<f32>::init_encoder(model.to_config(0, dropout), seed);
            let trace = pretrain(&sentences, &mut params, &cfg)?;
            checkpoint::save(&params, &out)?;
            write_loss_trace(&trace, &out.with_extension("loss.csv"))?;
            println!(
                "pretrained {} epochs on {} sentences, final mean loss {:.4}, wrote {}",
                epochs,
                sentences.len(),
                trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Synth {
            input,
            out,
            imbalance,
            rho,
            meta_frac,
            balanced_meta,
            test_frac,
            seed,
        } => {
            let full = match &input {
                Some(path) => ingest(path)?,
                None => synth::generate(&synth::SynthConfig {
                    seed,
                    ..Default::default()
                }),
            };
            let (rest, test) = split_meta(&full, test_frac, false, mix_seed(seed, 1))?;
            // meta comes off the full training pool so the long tail does
            // not starve it of minority-class examples
            let (pool, meta_set) =
                split_meta(&rest, meta_frac, balanced_meta, mix_seed(seed, 3))?;
            let train_clean = make_longtail(&pool, imbalance, mix_seed(seed, 2), None)?;
            let train = inject_uniform_noise(
                &train_clean,
                NoiseSpec {
                    rho,
                    seed: mix_seed(seed, 4),
                },
                &HashSet::new(),
            )?;
            let split = DatasetSplit {
                train,
                meta: meta_set,
                test,
            };
            split.validate()?;
            std::fs::create_dir_all(&out)?;
            split.save_dir(&out)?;
            let corrupted = split.train.examples.iter().filter(|e| e.corrupted).count();
            println!(
                "wrote split to {}: train {} ({} corrupted), meta {}, test {}",
                out.display(),
                split.train.len(),
                corrupted,
                split.meta.len(),
                split.test.len()
            );
            Ok(())
        }
        Command::Train {
            data,
            pipeline,
            ckpt,
            out,
            alpha,
            beta_meta,
            steps,
            batch_size,
            meta_batch_size,
            epsilon,
            lr,
            seed,
            dropout,
            model,
        } => {
            let pipeline: PipelineKind = pipeline.parse()?;
            let split = DatasetSplit::load_dir(&data)?;
            let num_classes = split.train.num_classes();

            let mut params = match &ckpt {
                Some(path) => {
                    let mut p = checkpoint::load::<f32>(path)?;
                    p.cfg.num_classes = num_classes;
                    p.cfg.dropout_p = dropout;
                    p
                }
                None => {
                    if pipeline.uses_pretraining() {
                        return Err(ApamError::Config(format!(
                            "pipeline {pipeline} needs a pre-trained encoder; run `apam pretrain` and pass --ckpt"
                        )));
                    }
                    EncoderParams::<f32>::init(model.to_config(num_classes, dropout), seed)
                }
            };
            params.ensure_head(seed);

            let train_cfg = TrainConfig {
                alpha,
                beta_meta,
                lr,
                steps,
                batch_size,
                meta_batch_size,
                loss: LossConfig {
                    kind: if pipeline.uses_reweighting() {
                        LossKind::Poly
                    } else {
                        match pipeline {
                            PipelineKind::Focal => LossKind::Focal,
                            PipelineKind::ClassBalanced => LossKind::ClassBalanced,
                            _ => LossKind::CrossEntropy,
                        }
                    },
                    epsilon,
                    ..Default::default()
                },
                weight_net_hidden: 100,
                seed,
            };
            train_cfg.validate()?;

            std::fs::create_dir_all(&out)?;
            if pipeline.uses_reweighting() {
                let (_theta, log) =
                    meta::train(&split.train, &split.meta, &mut params, &train_cfg)?;
                write_train_log(&log, &out.join("train_log.csv"))?;
            } else {
                let trace = fine_tune(&split.train, &mut params, &train_cfg)?;
                write_loss_trace(&trace, &out.join("train_log.csv"))?;
            }

            checkpoint::save(&params, &out.join("model.apam"))?;
            let mut report = evaluate(&params, &split.test)?;
            report.seed = seed;
            report.config = serde_json::json!({
                "pipeline": pipeline.name(),
                "train": train_cfg,
                "model": params.cfg,
            });
            write_report(&report, &out.join("report.json"))?;
            println!(
                "{pipeline}: test accuracy {:.4}, wrote {}",
                report.accuracy,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            model,
            test,
            out,
            label_map,
        } => {
            let params = checkpoint::load::<f32>(&model)?;
            if !params.has_head() {
                return Err(ApamError::Config(format!(
                    "{} is an encoder-only checkpoint; train a classifier first",
                    model.display()
                )));
            }
            let mut test_set = ingest(&test)?;
            let map_path = label_map.or_else(|| {
                let sibling = test.with_file_name("label_map.json");
                sibling.exists().then_some(sibling)
            });
            if let Some(path) = map_path {
                test_set.remap_labels(&read_label_map(&path)?)?;
            }
            check_labels_fit(&test_set, params.cfg.num_classes)?;
            let report = evaluate(&params, &test_set)?;
            write_report(&report, &out)?;
            println!("accuracy {:.4}, wrote {}", report.accuracy, out.display());
            Ok(())
        }
        Command::Sweep { config, rhos } => {
            if rhos.is_empty() {
                return Err(ApamError::Config("--rhos must list at least one ratio".into()));
            }
            let spec: SweepSpec = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            let pipelines: Vec<PipelineKind> = spec
                .pipelines
                .iter()
                .map(|p| p.parse())
                .collect::<Result<_, _>>()?;
            let split = DatasetSplit::load_dir(&spec.data)?;
            let num_classes = split.train.num_classes();
            let cfg = ExperimentConfig {
                pipeline: PipelineKind::Apam,
                model: spec.model.unwrap_or(ModelConfig {
                    num_classes,
                    ..Default::default()
                }),
                pretrain: spec.pretrain.unwrap_or_default(),
                train: spec.train.unwrap_or_default(),
                seed: spec.seed,
            };
            let result = sensitivity_sweep::<f32>(&split, &cfg, &rhos, &pipelines)?;
            write_sweep_csv(&result, &spec.out)?;
            println!(
                "swept {} pipelines over {} ratios, wrote {}",
                result.rows.len(),
                result.rhos.len(),
                spec.out.display()
            );
            Ok(())
        }
    }
}

fn check_labels_fit(dataset: &Dataset, num_classes: usize) -> Result<(), ApamError> {
    if let Some(ex) = dataset.examples.iter().find(|e| e.label >= num_classes) {
        return Err(ApamError::Ingest(format!(
            "example {} has label {} but the model predicts {} classes",
            ex.id, ex.label, num_classes
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
