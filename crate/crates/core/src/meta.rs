//! Stage two: bilevel meta-learned instance reweighting.
//!
//! A 1→100→1 weight net maps each per-sample training loss to a weight in
//! (0,1). Each step takes a virtual SGD step Ŵ(θ) with the current
//! weights, evaluates the clean meta batch at Ŵ, and updates θ by the
//! exact closed-form meta-gradient
//!
//!   ∇θ = −(α/n) · Σ_i ⟨g_i, g_meta⟩ · ∂v_i/∂θ
//!
//! which equals d/dθ of the meta loss composed with the virtual step
//! because W, the per-sample losses L_i and their gradients g_i are all
//! held fixed while θ varies. The model W then moves with the refreshed
//! weights applied to the cached per-sample gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, per_sample_grads, Tape};
use crate::data::{Dataset, Example};
use crate::error::{ApamError, Result};
use crate::losses::{cross_entropy, focal_loss, poly_loss, LossConfig, LossKind};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::textmodel::{
    apply_sgd, classify, encode, mix_seed, sgd_step, BoundParams, EncoderParams, Gradients,
};

/// Meta model θ: a one-hidden-layer perceptron from a scalar loss to an
/// instance weight, squashed by a sigmoid so weights stay in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNetParams<F: Real> {
    arrays: BTreeMap<String, Tensor<F>>,
    hidden: usize,
}

impl<F: Real> WeightNetParams<F> {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x776e6574));
        // deliberately small: the net starts as a near-constant function
        // and only commits to a loss-weight mapping once the accumulated
        // meta signal is informative; full-scale Xavier locks in an
        // arbitrary initial monotonicity before clean and noisy losses
        // separate
        let a1 = 0.1 * (6.0 / (1 + hidden) as f64).sqrt();
        let w1 = (0..hidden)
            .map(|_| F::c((rng.gen::<f64>() * 2.0 - 1.0) * a1))
            .collect();
        let w2 = (0..hidden)
            .map(|_| F::c((rng.gen::<f64>() * 2.0 - 1.0) * a1))
            .collect();
        let mut arrays = BTreeMap::new();
        arrays.insert("wn.w1".to_string(), Tensor::matrix(w1, 1, hidden).unwrap());
        arrays.insert("wn.b1".to_string(), Tensor::zeros(&[hidden]));
        arrays.insert("wn.w2".to_string(), Tensor::matrix(w2, hidden, 1).unwrap());
        // positive output bias: initial weights sit near 0.9, so early
        // training matches unweighted SGD instead of running at half the
        // learning rate, and the meta signal prunes samples downward
        arrays.insert("wn.b2".to_string(), Tensor::vector(vec![F::c(2.0)]));
        WeightNetParams { arrays, hidden }
    }

    /// All-zero parameters; every weight comes out exactly sigmoid(0)=0.5.
    pub fn zeros(hidden: usize) -> Self {
        let mut arrays = BTreeMap::new();
        arrays.insert("wn.w1".to_string(), Tensor::zeros(&[1, hidden]));
        arrays.insert("wn.b1".to_string(), Tensor::zeros(&[hidden]));
        arrays.insert("wn.w2".to_string(), Tensor::zeros(&[hidden, 1]));
        arrays.insert("wn.b2".to_string(), Tensor::zeros(&[1]));
        WeightNetParams { arrays, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn arrays(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.arrays
    }

    fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.arrays {
            ids.insert(name.clone(), tape.param(value.clone()));
        }
        BoundParams::from_ids(ids)
    }
}

/// Forward the weight net on a batch of losses. Returns the weights and
/// the Jacobian rows ∂v_i/∂θ needed by the closed-form meta-gradient.
pub fn weight_net_forward<F: Real>(
    losses: &[F],
    theta: &WeightNetParams<F>,
) -> Result<(Vec<F>, Vec<Gradients<F>>)> {
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(ApamError::contract(
            "weight_net_forward",
            format!("non-finite loss input {bad}"),
        ));
    }
    let mut tape = Tape::new();
    let bound = theta.bind(&mut tape);
    let mut outs = Vec::with_capacity(losses.len());
    for &l in losses {
        let x = tape.leaf(Tensor::vector(vec![l]));
        let z1 = tape.matmul(x, bound.id("wn.w1"))?;
        let z1 = tape.add(z1, bound.id("wn.b1"))?;
        let h = tape.relu(z1);
        let z2 = tape.matmul(h, bound.id("wn.w2"))?;
        let z2 = tape.add(z2, bound.id("wn.b2"))?;
        let v = tape.pick(z2, 0)?;
        outs.push(tape.sigmoid(v));
    }
    let stacked = tape.stack(&outs)?;
    let weights: Vec<F> = tape.value(stacked).data().to_vec();
    let jac = per_sample_grads(&tape, stacked)?
        .iter()
        .map(|g| bound.named(&tape, g))
        .collect();
    Ok((weights, jac))
}

fn check_keys<F: Real>(
    op: &'static str,
    a: &Gradients<F>,
    b: &Gradients<F>,
) -> Result<()> {
    if a.len() != b.len() || !a.keys().eq(b.keys()) {
        return Err(ApamError::contract(
            op,
            format!(
                "parameter key mismatch: {:?} vs {:?}",
                a.keys().collect::<Vec<_>>(),
                b.keys().collect::<Vec<_>>()
            ),
        ));
    }
    Ok(())
}

/// Virtual inner step: Ŵ = W − (α/n)·Σ_i v_i·g_i.
pub fn inner_step<F: Real>(
    params: &EncoderParams<F>,
    per_sample: &[Gradients<F>],
    weights: &[F],
    alpha: f64,
) -> Result<EncoderParams<F>> {
    let n = per_sample.len();
    let mut out = params.clone();
    let scale = F::c(alpha / n as f64);
    for (g, &v) in per_sample.iter().zip(weights) {
        for (name, grad) in g {
            let arr = out.arrays_mut().get_mut(name).ok_or_else(|| {
                ApamError::contract("inner_step", format!("unknown parameter {name}"))
            })?;
            arr.axpy(-scale * v, grad);
        }
    }
    Ok(out)
}

/// Closed-form ∇θ of the meta loss through the virtual step.
pub fn meta_grad<F: Real>(
    theta: &WeightNetParams<F>,
    per_sample: &[Gradients<F>],
    jacobians: &[Vec<Gradients<F>>],
    meta_gradient: &Gradients<F>,
    alpha: f64,
) -> Result<Gradients<F>> {
    let n = per_sample.len();
    let mut out: Gradients<F> = theta
        .arrays()
        .iter()
        .map(|(k, v)| (k.clone(), v.zeros_like()))
        .collect();
    let scale = -F::c(alpha / n as f64);
    for (g_i, jac_i) in per_sample.iter().zip(jacobians.iter().flatten()) {
        check_keys("meta_grad", g_i, meta_gradient)?;
        let inner: F = g_i
            .iter()
            .map(|(name, g)| g.dot(&meta_gradient[name]))
            .sum();
        for (name, j) in jac_i {
            out.get_mut(name)
                .ok_or_else(|| {
                    ApamError::contract("meta_grad", format!("unknown theta key {name}"))
                })?
                .axpy(scale * inner, j);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Inner (virtual) step size α.
    pub alpha: f64,
    /// Meta step size for θ.
    pub beta_meta: f64,
    /// Learning rate of the real optimizer step on W.
    pub lr: f64,
    /// Max iterations T.
    pub steps: usize,
    /// Train batch size n.
    pub batch_size: usize,
    /// Meta batch size m.
    pub meta_batch_size: usize,
    pub loss: LossConfig,
    pub weight_net_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta_meta: 1e-3,
            lr: 0.1,
            steps: 300,
            batch_size: 128,
            meta_batch_size: 16,
            loss: LossConfig::default(),
            weight_net_hidden: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.alpha <= 0.0 || self.beta_meta <= 0.0 {
            return Err(ApamError::Config(format!(
                "alpha and beta_meta must be > 0, got {} / {}",
                self.alpha, self.beta_meta
            )));
        }
        if self.batch_size < 1 || self.meta_batch_size < 1 {
            return Err(ApamError::Config("batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub train_loss: f64,
    pub meta_loss: f64,
    pub mean_w_clean: f64,
    pub mean_w_noisy: f64,
    pub mean_w_head: f64,
    pub mean_w_tail: f64,
}

fn per_sample_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: crate::autodiff::NodeId,
    label: usize,
    loss: &LossConfig,
) -> Result<crate::autodiff::NodeId> {
    match loss.kind {
        LossKind::CrossEntropy | LossKind::ClassBalanced => cross_entropy(tape, logits, label),
        LossKind::Poly => poly_loss(tape, logits, label, loss.epsilon),
        LossKind::Focal => focal_loss(tape, logits, label, loss.gamma),
    }
}

fn mean_over<I: Iterator<Item = f64>>(iter: I) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for x in iter {
        sum += x;
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Classes at or above the median support count as head.
pub fn head_classes(dataset: &Dataset) -> Vec<bool> {
    let counts = dataset.class_counts();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    counts.iter().map(|&c| c >= median).collect()
}

/// One iteration of the bilevel loop; mutates W and θ in place.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Real>(
    params: &mut EncoderParams<F>,
    theta: &mut WeightNetParams<F>,
    train_batch: &[&Example],
    meta_batch: &[&Example],
    cfg: &TrainConfig,
    step: usize,
    head: &[bool],
) -> Result<StepDiagnostics> {
    let model_cfg = params.cfg;
    let n = train_batch.len();

    // (1) per-sample losses at W_t
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut loss_nodes = Vec::with_capacity(n);
    for ex in train_batch {
        // keyed on the example id, not batch position, so permuting the
        // batch cannot change any dropout mask
        let seed = mix_seed(cfg.seed, ((step as u64) << 24) ^ ex.id as u64);
        let emb = encode(&mut tape, &bound, &model_cfg, &ex.text, seed, true)?;
        let logits = classify(&mut tape, &bound, emb)?;
        loss_nodes.push(per_sample_loss(&mut tape, logits, ex.label, &cfg.loss)?);
    }
    let stacked = tape.stack(&loss_nodes)?;
    let losses: Vec<F> = tape.value(stacked).data().to_vec();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(ApamError::numeric(
            format!("train_step {step}: forward"),
            "non-finite per-sample loss",
        ));
    }
    let train_loss = mean_over(losses.iter().map(|l| l.as_f64()));

    let g: Vec<Gradients<F>> = per_sample_grads(&tape, stacked)?
        .iter()
        .map(|m| bound.named(&tape, m))
        .collect();

    // (2) current weights
    let (v, jac) = weight_net_forward(&losses, theta)?;

    // (3) virtual step
    let virtual_params = inner_step(params, &g, &v, cfg.alpha)?;

    // (4) unweighted meta loss at Ŵ (eval mode: no dropout on meta data)
    let mut meta_tape = Tape::new();
    let meta_bound = virtual_params.bind(&mut meta_tape);
    let mut meta_losses = Vec::with_capacity(meta_batch.len());
    for ex in meta_batch {
        let emb = encode(&mut meta_tape, &meta_bound, &model_cfg, &ex.text, 0, false)?;
        let logits = classify(&mut meta_tape, &meta_bound, emb)?;
        meta_losses.push(per_sample_loss(&mut meta_tape, logits, ex.label, &cfg.loss)?);
    }
    let meta_stacked = meta_tape.stack(&meta_losses)?;
    let meta_mean = meta_tape.mean(meta_stacked);
    let meta_loss = meta_tape.value(meta_mean).item();
    if !meta_loss.is_finite() {
        return Err(ApamError::numeric(
            format!("train_step {step}: meta forward"),
            "non-finite meta loss",
        ));
    }
    let g_meta = meta_bound.named(&meta_tape, &backward(&meta_tape, meta_mean)?);

    // (5) θ update
    let jacobians = vec![jac];
    let grad_theta = meta_grad(theta, &g, &jacobians, &g_meta, cfg.alpha)?;
    apply_sgd(theta.arrays_mut(), &grad_theta, F::c(cfg.beta_meta))?;

    // (6) refresh weights and take the real step on the cached gradients;
    // W_t is unchanged since (1), so reweighting g is exact
    let (v_new, _) = weight_net_forward(&losses, theta)?;
    let mut grad_w: Gradients<F> = g[0]
        .iter()
        .map(|(k, t)| (k.clone(), t.zeros_like()))
        .collect();
    let inv_n = F::c(1.0 / n as f64);
    for (g_i, &w) in g.iter().zip(&v_new) {
        for (name, grad) in g_i {
            grad_w.get_mut(name).unwrap().axpy(inv_n * w, grad);
        }
    }
    sgd_step(params, &grad_w, F::c(cfg.lr))?;

    let w64: Vec<f64> = v_new.iter().map(|w| w.as_f64()).collect();
    let pick = |pred: &dyn Fn(&Example) -> bool| {
        mean_over(
            train_batch
                .iter()
                .zip(&w64)
                .filter(|(ex, _)| pred(ex))
                .map(|(_, &w)| w),
        )
    };
    Ok(StepDiagnostics {
        step,
        train_loss,
        meta_loss: meta_loss.as_f64(),
        mean_w_clean: pick(&|ex| !ex.corrupted),
        mean_w_noisy: pick(&|ex| ex.corrupted),
        mean_w_head: pick(&|ex| head[ex.label]),
        mean_w_tail: pick(&|ex| !head[ex.label]),
    })
}

/// Run T bilevel steps with fresh batches each iteration. Train batches
/// are uniform with replacement from D_t; meta batches are uniform
/// without replacement from D_m.
pub fn train<F: Real>(
    train_set: &Dataset,
    meta_set: &Dataset,
    params: &mut EncoderParams<F>,
    cfg: &TrainConfig,
) -> Result<(WeightNetParams<F>, Vec<StepDiagnostics>)> {
    if !train_set.ids().is_disjoint(&meta_set.ids()) {
        return Err(ApamError::Config(
            "train and meta sets share example ids".into(),
        ));
    }
    if meta_set.examples.iter().any(|e| e.corrupted) {
        return Err(ApamError::Config("meta set must be clean".into()));
    }
    let head = head_classes(train_set);
    let mut theta = WeightNetParams::init(cfg.weight_net_hidden, cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6261_7463 ^ step as u64));
        let train_batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &train_set.examples[rng.gen_range(0..train_set.len())])
            .collect();
        let meta_batch: Vec<&Example> = {
            let mut idx: Vec<usize> = (0..meta_set.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(cfg.meta_batch_size.min(meta_set.len()));
            idx.into_iter().map(|i| &meta_set.examples[i]).collect()
        };
        log.push(train_step(
            params,
            &mut theta,
            &train_batch,
            &meta_batch,
            cfg,
            step,
            &head,
        )?);
    }
    Ok((theta, log))
}

/// Write the step log as CSV:
/// `step,train_loss,meta_loss,mean_w_clean,mean_w_noisy,mean_w_head,mean_w_tail`.
pub fn write_train_log(log: &[StepDiagnostics], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "step,train_loss,meta_loss,mean_w_clean,mean_w_noisy,mean_w_head,mean_w_tail"
    )?;
    for d in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            d.step, d.train_loss, d.meta_loss, d.mean_w_clean, d.mean_w_noisy, d.mean_w_head, d.mean_w_tail
        )?;
    }
    w.flush()?;
    Ok(())
}
