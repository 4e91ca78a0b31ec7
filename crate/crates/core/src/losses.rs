//! Training objectives: cross-entropy, the polynomially-corrected
//! cross-entropy used for fine-tuning, the focal and class-balanced
//! baselines, and the in-batch contrastive loss used for pre-training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{ApamError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Poly,
    Focal,
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the polynomial correction term.
    pub epsilon: f64,
    /// Focal focusing parameter.
    pub gamma: f64,
    /// Class-balanced effective-number decay.
    pub cb_beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Poly,
            epsilon: 1.0,
            gamma: 2.0,
            cb_beta: 0.9999,
            tau: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(ApamError::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.gamma < 0.0 {
            return Err(ApamError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.cb_beta) {
            return Err(ApamError::Config(format!("cb_beta must be in [0,1), got {}", self.cb_beta)));
        }
        if self.tau <= 0.0 {
            return Err(ApamError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_label<F: Real>(tape: &Tape<F>, logits: NodeId, label: usize) -> Result<usize> {
    let v = tape.value(logits);
    if v.rank() != 1 {
        return Err(ApamError::Shape {
            op: "loss",
            lhs: v.shape().to_vec(),
            rhs: vec![],
        });
    }
    let c = v.numel();
    if label >= c {
        return Err(ApamError::contract(
            "loss",
            format!("label {label} out of range for {c} classes"),
        ));
    }
    Ok(c)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy<F: Real>(tape: &mut Tape<F>, logits: NodeId, label: usize) -> Result<NodeId> {
    check_label(tape, logits, label)?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, label)?;
    Ok(tape.scale(picked, -F::one()))
}

/// Cross-entropy plus the leading polynomial correction `ε(1 − P_c)`.
pub fn poly_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: NodeId,
    label: usize,
    epsilon: f64,
) -> Result<NodeId> {
    let ce = cross_entropy(tape, logits, label)?;
    let sm = tape.softmax(logits)?;
    let pc = tape.pick(sm, label)?;
    let one = tape.leaf(Tensor::scalar(F::one()));
    let gap = tape.sub(one, pc)?;
    let term = tape.scale(gap, F::c(epsilon));
    tape.add(ce, term)
}

/// `−(1 − P_c)^γ · log P_c`.
pub fn focal_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: NodeId,
    label: usize,
    gamma: f64,
) -> Result<NodeId> {
    check_label(tape, logits, label)?;
    let sm = tape.softmax(logits)?;
    let pc = tape.pick(sm, label)?;
    let one = tape.leaf(Tensor::scalar(F::one()));
    let gap = tape.sub(one, pc)?;
    let modulator = tape.pow_scalar(gap, F::c(gamma));
    let ls = tape.log_softmax(logits)?;
    let logp = tape.pick(ls, label)?;
    let prod = tape.mul(modulator, logp)?;
    Ok(tape.scale(prod, -F::one()))
}

/// Effective-number class weights `(1−β)/(1−β^{n_c})`, renormalized so the
/// weights sum to C and the mean weight is 1.
pub fn class_balanced_weights(class_counts: &[usize], cb_beta: f64) -> Result<Vec<f64>> {
    if let Some(pos) = class_counts.iter().position(|&c| c == 0) {
        return Err(ApamError::contract(
            "class_balanced_weights",
            format!("class {pos} has zero examples"),
        ));
    }
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&n| {
            if cb_beta == 0.0 {
                1.0
            } else {
                (1.0 - cb_beta) / (1.0 - cb_beta.powi(n as i32))
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let c = class_counts.len() as f64;
    Ok(raw.into_iter().map(|w| w * c / total).collect())
}

/// In-batch contrastive loss over anchor/positive view pairs:
/// mean over i of `−log( e^{sim(s_i, s_i⁺)/τ} / Σ_j e^{sim(s_i, s_j⁺)/τ} )`.
pub fn contrastive_loss<F: Real>(
    tape: &mut Tape<F>,
    anchors: NodeId,
    positives: NodeId,
    tau: f64,
) -> Result<NodeId> {
    let (va, vp) = (tape.value(anchors), tape.value(positives));
    if va.rank() != 2 || va.shape() != vp.shape() {
        return Err(ApamError::Shape {
            op: "contrastive_loss",
            lhs: va.shape().to_vec(),
            rhs: vp.shape().to_vec(),
        });
    }
    if tau <= 0.0 {
        return Err(ApamError::domain("contrastive_loss", format!("tau must be > 0, got {tau}")));
    }
    let n = va.shape()[0];
    let a_norm = tape.l2_normalize_rows(anchors)?;
    let p_norm = tape.l2_normalize_rows(positives)?;
    let sims = tape.matmul_nt(a_norm, p_norm)?;
    let scaled = tape.scale(sims, F::c(1.0 / tau));
    let mut per_row = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.row(scaled, i)?;
        let ls = tape.log_softmax(row)?;
        let own = tape.pick(ls, i)?;
        per_row.push(tape.scale(own, -F::one()));
    }
    let stacked = tape.stack(&per_row)?;
    Ok(tape.mean(stacked))
}
