//! Classification metrics: accuracy, support-weighted and macro
//! precision/recall/F1, and a per-class breakdown with head/tail grouping
//! by support quantile.

use serde::{Deserialize, Serialize};

use crate::error::{ApamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted: Averages,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub per_class: Vec<ClassMetrics>,
    /// Classes at or above the median support.
    pub head_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub version: String,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(
    predictions: &[usize],
    golds: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != golds.len() {
        return Err(ApamError::contract(
            "compute_metrics",
            format!(
                "length mismatch: {} predictions vs {} golds",
                predictions.len(),
                golds.len()
            ),
        ));
    }
    if predictions.is_empty() {
        return Err(ApamError::contract("compute_metrics", "empty input"));
    }
    for &v in predictions.iter().chain(golds) {
        if v >= num_classes {
            return Err(ApamError::contract(
                "compute_metrics",
                format!("class id {v} out of range for {num_classes} classes"),
            ));
        }
    }

    let n = golds.len();
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &g) in predictions.iter().zip(golds) {
        support[g] += 1;
        if p == g {
            tp[g] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }

    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let precision = if tp[c] + fp[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / (tp[c] + fp[c]) as f64
            };
            let recall = if tp[c] + fn_[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / (tp[c] + fn_[c]) as f64
            };
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1: f1(precision, recall),
                support: support[c],
            }
        })
        .collect();

    let weighted = {
        let mut p = 0.0;
        let mut r = 0.0;
        let mut f = 0.0;
        for m in &per_class {
            let w = m.support as f64 / n as f64;
            p += w * m.precision;
            r += w * m.recall;
            f += w * m.f1;
        }
        Averages {
            precision: p,
            recall: r,
            f1: f,
        }
    };

    let populated: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let k = populated.len() as f64;
    let macro_avg = Averages {
        precision: populated.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: populated.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: populated.iter().map(|m| m.f1).sum::<f64>() / k,
    };

    let mut sorted_support: Vec<usize> = support.clone();
    sorted_support.sort_unstable();
    let median = sorted_support[num_classes / 2];
    let head_classes: Vec<usize> = (0..num_classes).filter(|&c| support[c] >= median).collect();
    let tail_classes: Vec<usize> = (0..num_classes).filter(|&c| support[c] < median).collect();

    Ok(MetricsReport {
        accuracy: correct as f64 / n as f64,
        weighted,
        macro_avg,
        per_class,
        head_classes,
        tail_classes,
        seed: 0,
        config: serde_json::Value::Null,
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_all_ones() {
        let golds = vec![0, 1, 2, 1, 0];
        let r = compute_metrics(&golds, &golds, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.weighted.f1, 1.0);
        assert_eq!(r.macro_avg.precision, 1.0);
    }

    #[test]
    fn hand_confusion_matrix_oracle() {
        // golds [0,0,1,1], preds [0,1,1,1]
        let r = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[1].recall, 1.0);
        let expected_wf1 = 0.5 * (2.0 / 3.0) + 0.5 * 0.8;
        assert!((r.weighted.f1 - expected_wf1).abs() < 1e-12);
        assert!((r.weighted.f1 - 0.7333).abs() < 5e-4);
    }

    #[test]
    fn constant_predictor_uniform_golds() {
        let golds: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let preds = vec![0usize; 40];
        let r = compute_metrics(&preds, &golds, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
    }

    #[test]
    fn weighted_recall_equals_accuracy() {
        let golds = vec![0, 0, 0, 1, 1, 2, 2, 2, 2, 2];
        let preds = vec![0, 1, 0, 1, 2, 2, 2, 0, 2, 1];
        let r = compute_metrics(&preds, &golds, 3).unwrap();
        assert!((r.weighted.recall - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            compute_metrics(&[0], &[0, 1], 2),
            Err(ApamError::Contract { .. })
        ));
    }
}
