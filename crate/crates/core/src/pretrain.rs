//! Stage one: self-supervised domain-adaptive pre-training. Every
//! sentence is encoded twice with independent dropout masks; the two
//! views form a positive pair and all other in-batch views are negatives.
//! Labels never enter this stage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, NodeId, Tape};
use crate::error::{ApamError, Result};
use crate::losses::contrastive_loss;
use crate::real::Real;
use crate::textmodel::{apply_sgd, encode, mix_seed, BoundParams, EncoderParams, ModelConfig};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 128,
            epochs: 10,
            tau: 0.05,
            lr: 0.1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(ApamError::Config(format!(
                "pretrain batch size must be >= 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(ApamError::Config("pretrain epochs must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(ApamError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Encode the same sentence twice with seeds derived from
/// (seed, example index); returns the anchor and positive view nodes.
pub fn make_views<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    text: &str,
    seed: u64,
    index: u64,
) -> Result<(NodeId, NodeId)> {
    let seed_a = mix_seed(seed, 2 * index);
    let seed_b = mix_seed(seed, 2 * index + 1);
    let anchor = encode(tape, bound, cfg, text, seed_a, true)?;
    let positive = encode(tape, bound, cfg, text, seed_b, true)?;
    Ok((anchor, positive))
}

/// One pre-training epoch's mean contrastive loss.
pub type LossTrace = Vec<f64>;

/// SGD over shuffled mini-batches of dropout view pairs. The final
/// partial batch of each epoch is dropped. Returns the per-epoch mean
/// loss trace.
pub fn pretrain<F: Real>(
    corpus: &[String],
    params: &mut EncoderParams<F>,
    cfg: &PretrainConfig,
) -> Result<LossTrace> {
    if corpus.len() < cfg.batch_size {
        return Err(ApamError::Config(format!(
            "corpus has {} sentences but one batch needs {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let model_cfg = params.cfg;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x70726574 ^ epoch as u64));
        order.shuffle(&mut rng);

        let view_seed = mix_seed(cfg.seed, epoch as u64);
        let mut epoch_losses = Vec::new();
        for (batch_id, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut anchors = Vec::with_capacity(batch.len());
            let mut positives = Vec::with_capacity(batch.len());
            for &i in batch {
                let (a, p) =
                    make_views(&mut tape, &bound, &model_cfg, &corpus[i], view_seed, i as u64)?;
                anchors.push(a);
                positives.push(p);
            }
            let a_mat = tape.concat_rows(&anchors)?;
            let p_mat = tape.concat_rows(&positives)?;
            let loss = contrastive_loss(&mut tape, a_mat, p_mat, cfg.tau)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(ApamError::numeric(
                    format!("pretrain epoch {epoch} batch {batch_id}"),
                    format!("contrastive loss is {loss_val}"),
                ));
            }
            let grads = bound.named(&tape, &backward(&tape, loss)?);
            apply_sgd(params.arrays_mut(), &grads, F::c(cfg.lr))?;
            epoch_losses.push(loss_val.as_f64());
        }
        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        trace.push(mean);
    }
    Ok(trace)
}

/// Mean cosine similarity of positive view pairs over a sample of the
/// corpus; used to track what pre-training buys.
pub fn mean_pair_similarity<F: Real>(
    corpus: &[String],
    params: &EncoderParams<F>,
    seed: u64,
    sample: usize,
) -> Result<f64> {
    let model_cfg = params.cfg;
    let n = corpus.len().min(sample);
    let mut total = 0.0;
    for (i, text) in corpus.iter().take(n).enumerate() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (a, p) = make_views(&mut tape, &bound, &model_cfg, text, seed, i as u64)?;
        let an = tape.value(a);
        let pn = tape.value(p);
        let na = an.dot(an).as_f64().sqrt();
        let np = pn.dot(pn).as_f64().sqrt();
        if na == 0.0 || np == 0.0 {
            continue;
        }
        total += an.dot(pn).as_f64() / (na * np);
    }
    Ok(total / n as f64)
}

/// Write the per-epoch loss trace as `epoch,mean_loss` CSV.
pub fn write_loss_trace(trace: &[f64], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,mean_loss")?;
    for (epoch, loss) in trace.iter().enumerate() {
        writeln!(w, "{epoch},{loss}")?;
    }
    w.flush()?;
    Ok(())
}
