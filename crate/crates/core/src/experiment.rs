//! Experiment harness: named pipelines over a fixed train/meta/test
//! split, a plain fine-tuning loop for the non-bilevel baselines, and a
//! noise-ratio sensitivity sweep. Everything is seeded so repeated runs
//! serialize to identical bytes.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape};
use crate::data::{inject_uniform_noise, Dataset, DatasetSplit, Example, NoiseSpec};
use crate::error::{ApamError, Result};
use crate::losses::{
    class_balanced_weights, cross_entropy, focal_loss, poly_loss, LossKind,
};
use crate::meta::{self, StepDiagnostics, TrainConfig, WeightNetParams};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::pretrain::{pretrain, LossTrace, PretrainConfig};
use crate::real::Real;
use crate::textmodel::{classify, encode, mix_seed, sgd_step, EncoderParams, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Cross-entropy fine-tuning, no pre-training, no reweighting.
    CeBaseline,
    /// Focal loss fine-tuning.
    Focal,
    /// Cross-entropy with effective-number class weights.
    ClassBalanced,
    /// Bilevel instance reweighting without the contrastive stage.
    Mwn,
    /// Contrastive pre-training followed by plain cross-entropy.
    SimcseOnly,
    /// Both stages: contrastive pre-training plus bilevel reweighting.
    Apam,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 6] = [
        PipelineKind::CeBaseline,
        PipelineKind::Focal,
        PipelineKind::ClassBalanced,
        PipelineKind::Mwn,
        PipelineKind::SimcseOnly,
        PipelineKind::Apam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::CeBaseline => "ce_baseline",
            PipelineKind::Focal => "focal",
            PipelineKind::ClassBalanced => "class_balanced",
            PipelineKind::Mwn => "mwn",
            PipelineKind::SimcseOnly => "simcse_only",
            PipelineKind::Apam => "apam",
        }
    }

    pub fn uses_pretraining(&self) -> bool {
        matches!(self, PipelineKind::SimcseOnly | PipelineKind::Apam)
    }

    pub fn uses_reweighting(&self) -> bool {
        matches!(self, PipelineKind::Mwn | PipelineKind::Apam)
    }

    /// The fine-tuning loss this pipeline trains with. The bilevel
    /// pipelines keep whatever the caller configured (poly by default).
    fn loss_kind(&self, configured: LossKind) -> LossKind {
        match self {
            PipelineKind::CeBaseline | PipelineKind::SimcseOnly => LossKind::CrossEntropy,
            PipelineKind::Focal => LossKind::Focal,
            PipelineKind::ClassBalanced => LossKind::ClassBalanced,
            PipelineKind::Mwn | PipelineKind::Apam => configured,
        }
    }
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineKind {
    type Err = ApamError;

    fn from_str(s: &str) -> Result<Self> {
        PipelineKind::ALL
            .iter()
            .find(|p| p.name() == s)
            .copied()
            .ok_or_else(|| {
                ApamError::Config(format!(
                    "unknown pipeline {s:?}; expected one of {}",
                    PipelineKind::ALL.map(|p| p.name()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineKind,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome<F: Real> {
    pub params: EncoderParams<F>,
    pub theta: Option<WeightNetParams<F>>,
    pub report: MetricsReport,
    pub pretrain_trace: Option<LossTrace>,
    pub train_log: Option<Vec<StepDiagnostics>>,
    pub fine_tune_trace: Option<Vec<f64>>,
}

/// Greedy class prediction in eval mode.
pub fn predict<F: Real>(params: &EncoderParams<F>, text: &str) -> Result<usize> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let emb = encode(&mut tape, &bound, &params.cfg, text, 0, false)?;
    let logits = classify(&mut tape, &bound, emb)?;
    let values = tape.value(logits).data();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn evaluate<F: Real>(params: &EncoderParams<F>, test: &Dataset) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(ApamError::contract("evaluate", "empty test set"));
    }
    let preds: Vec<usize> = test
        .examples
        .iter()
        .map(|ex| predict(params, &ex.text))
        .collect::<Result<_>>()?;
    let golds: Vec<usize> = test.examples.iter().map(|ex| ex.label).collect();
    compute_metrics(&preds, &golds, test.num_classes())
}

/// Single-level fine-tuning used by the non-bilevel pipelines: T steps of
/// SGD on the batch-mean loss, batches drawn with the same sampler as the
/// bilevel loop so the pipelines see identical data streams. Returns the
/// per-step mean loss.
pub fn fine_tune<F: Real>(
    train_set: &Dataset,
    params: &mut EncoderParams<F>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if train_set.is_empty() {
        return Err(ApamError::Config("empty training set".into()));
    }
    let class_weights = if cfg.loss.kind == LossKind::ClassBalanced {
        Some(class_balanced_weights(
            &train_set.class_counts(),
            cfg.loss.cb_beta,
        )?)
    } else {
        None
    };
    let model_cfg = params.cfg;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6261_7463 ^ step as u64));
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &train_set.examples[rng.gen_range(0..train_set.len())])
            .collect();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut nodes = Vec::with_capacity(batch.len());
        for ex in &batch {
            let seed = mix_seed(cfg.seed, ((step as u64) << 24) ^ ex.id as u64);
            let emb = encode(&mut tape, &bound, &model_cfg, &ex.text, seed, true)?;
            let logits = classify(&mut tape, &bound, emb)?;
            let mut loss = match cfg.loss.kind {
                LossKind::CrossEntropy | LossKind::ClassBalanced => {
                    cross_entropy(&mut tape, logits, ex.label)?
                }
                LossKind::Poly => poly_loss(&mut tape, logits, ex.label, cfg.loss.epsilon)?,
                LossKind::Focal => focal_loss(&mut tape, logits, ex.label, cfg.loss.gamma)?,
            };
            if let Some(w) = &class_weights {
                loss = tape.scale(loss, F::c(w[ex.label]));
            }
            nodes.push(loss);
        }
        let stacked = tape.stack(&nodes)?;
        let mean = tape.mean(stacked);
        let loss_val = tape.value(mean).item();
        if !loss_val.is_finite() {
            return Err(ApamError::numeric(
                format!("fine_tune step {step}"),
                "non-finite batch loss",
            ));
        }
        let grads = bound.named(&tape, &backward(&tape, mean)?);
        sgd_step(params, &grads, F::c(cfg.lr))?;
        trace.push(loss_val.as_f64());
    }
    Ok(trace)
}

/// Run one pipeline end to end on a prepared split and evaluate on the
/// held-out test set. The report echoes the seed and full configuration.
pub fn run_experiment<F: Real>(
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome<F>> {
    split.validate()?;
    let mut train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;
    train_cfg.loss.kind = cfg.pipeline.loss_kind(cfg.train.loss.kind);

    let mut params = EncoderParams::<F>::init(cfg.model, cfg.seed);

    let pretrain_trace = if cfg.pipeline.uses_pretraining() {
        let corpus: Vec<String> = split
            .train
            .examples
            .iter()
            .map(|ex| ex.text.clone())
            .collect();
        let mut pre_cfg = cfg.pretrain;
        pre_cfg.seed = cfg.seed;
        // the head is bound but only ever receives zero gradient here
        Some(pretrain(&corpus, &mut params, &pre_cfg)?)
    } else {
        None
    };

    let (theta, train_log, fine_tune_trace) = if cfg.pipeline.uses_reweighting() {
        let (theta, log) = meta::train(&split.train, &split.meta, &mut params, &train_cfg)?;
        (Some(theta), Some(log), None)
    } else {
        let trace = fine_tune(&split.train, &mut params, &train_cfg)?;
        (None, None, Some(trace))
    };

    let mut report = evaluate(&params, &split.test)?;
    report.seed = cfg.seed;
    report.config = serde_json::to_value(cfg)?;
    Ok(ExperimentOutcome {
        params,
        theta,
        report,
        pretrain_trace,
        train_log,
        fine_tune_trace,
    })
}

/// One pipeline's row of a noise sweep: accuracy per noise ratio, `None`
/// where the run failed.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub pipeline: PipelineKind,
    pub accuracies: Vec<Option<f64>>,
    pub average: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rhos: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

/// Re-noise the clean training set at each ρ and run the comparison
/// pipelines. A failing cell is recorded rather than aborting the sweep.
pub fn sensitivity_sweep<F: Real>(
    clean_split: &DatasetSplit,
    cfg: &ExperimentConfig,
    rhos: &[f64],
    pipelines: &[PipelineKind],
) -> Result<SweepResult> {
    if rhos.is_empty() {
        return Err(ApamError::Config("sweep needs at least one noise ratio".into()));
    }
    if clean_split.train.examples.iter().any(|e| e.corrupted) {
        return Err(ApamError::Config(
            "sweep expects a clean training set to re-noise".into(),
        ));
    }
    let mut rows = Vec::with_capacity(pipelines.len());
    for &pipeline in pipelines {
        let mut accuracies = Vec::with_capacity(rhos.len());
        for &rho in rhos {
            let noisy = inject_uniform_noise(
                &clean_split.train,
                NoiseSpec {
                    rho,
                    seed: mix_seed(cfg.seed, 0x6e6f6973),
                },
                &Default::default(),
            )?;
            let split = DatasetSplit {
                train: noisy,
                meta: clean_split.meta.clone(),
                test: clean_split.test.clone(),
            };
            let run_cfg = ExperimentConfig {
                pipeline,
                ..cfg.clone()
            };
            accuracies.push(
                run_experiment::<F>(&split, &run_cfg)
                    .ok()
                    .map(|o| o.report.accuracy),
            );
        }
        let ok: Vec<f64> = accuracies.iter().flatten().copied().collect();
        let average = if ok.len() == rhos.len() {
            Some(ok.iter().sum::<f64>() / ok.len() as f64)
        } else {
            None
        };
        rows.push(SweepRow {
            pipeline,
            accuracies,
            average,
        });
    }
    Ok(SweepResult {
        rhos: rhos.to_vec(),
        rows,
    })
}

/// CSV with one row per pipeline: `pipeline,rho=...,...,average`;
/// failed cells print as `failed`.
pub fn write_sweep_csv(result: &SweepResult, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("pipeline".to_string())
        .chain(result.rhos.iter().map(|r| format!("rho={r}")))
        .chain(std::iter::once("average".to_string()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let cell = |v: &Option<f64>| v.map_or("failed".to_string(), |a| format!("{a:.4}"));
    for row in &result.rows {
        let mut fields = vec![row.pipeline.name().to_string()];
        fields.extend(row.accuracies.iter().map(cell));
        fields.push(cell(&row.average));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(report: &MetricsReport, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
