//! Randomized invariants: loss identities, permutation symmetries, and
//! metric relabeling.

use apam_core::autodiff::Tape;
use apam_core::data::Example;
use apam_core::losses::{contrastive_loss, cross_entropy, focal_loss, poly_loss};
use apam_core::losses::LossConfig;
use apam_core::meta::{train_step, weight_net_forward, TrainConfig, WeightNetParams};
use apam_core::metrics::compute_metrics;
use apam_core::tensor::Tensor;
use apam_core::textmodel::{EncoderParams, ModelConfig, Vocab};
use proptest::prelude::*;

fn loss_value(
    logits: &[f64],
    label: usize,
    f: &dyn Fn(&mut Tape<f64>, apam_core::autodiff::NodeId, usize) -> apam_core::autodiff::NodeId,
) -> f64 {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::vector(logits.to_vec()));
    let node = f(&mut tape, l, label);
    tape.value(node).item()
}

proptest! {
    #[test]
    fn poly_with_zero_epsilon_is_cross_entropy(
        logits in proptest::collection::vec(-8.0f64..8.0, 2..10),
        label_pick in 0usize..1000,
    ) {
        let label = label_pick % logits.len();
        let ce = loss_value(&logits, label, &|t, l, y| cross_entropy(t, l, y).unwrap());
        let poly = loss_value(&logits, label, &|t, l, y| poly_loss(t, l, y, 0.0).unwrap());
        prop_assert!((ce - poly).abs() < 1e-7, "ce {ce} vs poly {poly}");
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy(
        logits in proptest::collection::vec(-8.0f64..8.0, 2..10),
        label_pick in 0usize..1000,
    ) {
        let label = label_pick % logits.len();
        let ce = loss_value(&logits, label, &|t, l, y| cross_entropy(t, l, y).unwrap());
        let focal = loss_value(&logits, label, &|t, l, y| focal_loss(t, l, y, 0.0).unwrap());
        prop_assert!((ce - focal).abs() < 1e-7, "ce {ce} vs focal {focal}");
    }

    #[test]
    fn poly_never_below_cross_entropy(
        logits in proptest::collection::vec(-8.0f64..8.0, 2..10),
        label_pick in 0usize..1000,
        epsilon in 0.0f64..3.0,
    ) {
        let label = label_pick % logits.len();
        let ce = loss_value(&logits, label, &|t, l, y| cross_entropy(t, l, y).unwrap());
        let poly = loss_value(&logits, label, &|t, l, y| poly_loss(t, l, y, epsilon).unwrap());
        // epsilon·(1 − P_label) ≥ 0
        prop_assert!(poly >= ce - 1e-9);
    }

    #[test]
    fn contrastive_invariant_under_joint_row_permutation(
        rows in proptest::collection::vec(
            proptest::collection::vec(-2.0f64..2.0, 4),
            2..6,
        ),
        shift in 1usize..5,
    ) {
        // skip near-zero rows, where the cosine is undefined by contract
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2));
        let n = rows.len();
        let positives: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().map(|x| x + 0.1).collect()).collect();
        prop_assume!(positives.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2));

        let eval = |order: &[usize]| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::matrix(
                order.iter().flat_map(|&i| rows[i].clone()).collect(), n, 4).unwrap());
            let p = tape.leaf(Tensor::matrix(
                order.iter().flat_map(|&i| positives[i].clone()).collect(), n, 4).unwrap());
            let loss = contrastive_loss(&mut tape, a, p, 0.1).unwrap();
            tape.value(loss).item()
        };
        let identity: Vec<usize> = (0..n).collect();
        let rotated: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        prop_assert!((eval(&identity) - eval(&rotated)).abs() < 1e-9);
    }

    #[test]
    fn metrics_invariant_under_class_relabeling(
        pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..40),
        rot in 1usize..5,
    ) {
        let c = 5;
        let (preds, golds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let base = compute_metrics(&preds, &golds, c).unwrap();
        let relabel = |v: &[usize]| -> Vec<usize> { v.iter().map(|&x| (x + rot) % c).collect() };
        let moved = compute_metrics(&relabel(&preds), &relabel(&golds), c).unwrap();
        prop_assert!((base.accuracy - moved.accuracy).abs() < 1e-12);
        prop_assert!((base.macro_avg.f1 - moved.macro_avg.f1).abs() < 1e-12);
        prop_assert!((base.weighted.f1 - moved.weighted.f1).abs() < 1e-12);
    }

    #[test]
    fn weighted_recall_equals_accuracy(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
    ) {
        let (preds, golds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let report = compute_metrics(&preds, &golds, 4).unwrap();
        prop_assert!((report.weighted.recall - report.accuracy).abs() < 1e-12);
    }

    #[test]
    fn weight_net_outputs_stay_in_unit_interval(
        losses in proptest::collection::vec(0.0f64..30.0, 1..20),
        seed in 0u64..1000,
    ) {
        let theta = WeightNetParams::<f64>::init(100, seed);
        let (v, _) = weight_net_forward(&losses, &theta).unwrap();
        prop_assert!(v.iter().all(|w| *w > 0.0 && *w < 1.0));
    }
}

fn example(id: usize, text: &str, label: usize) -> Example {
    Example {
        id,
        text: text.to_string(),
        label,
        original_label: label,
        corrupted: false,
    }
}

#[test]
fn train_step_is_batch_order_invariant() {
    let cfg = ModelConfig {
        vocab: Vocab {
            hash_buckets: 64,
            lowercase: true,
        },
        embed_dim: 6,
        fc1_dim: 8,
        fc2_dim: 6,
        num_classes: 3,
        dropout_p: 0.2,
    };
    let examples = vec![
        example(0, "alpha beta gamma", 0),
        example(1, "delta epsilon", 1),
        example(2, "zeta eta theta", 2),
        example(3, "iota kappa", 0),
    ];
    let meta = vec![example(10, "alpha beta", 0), example(11, "delta zeta", 1)];
    let train_cfg = TrainConfig {
        alpha: 0.3,
        beta_meta: 0.05,
        lr: 0.2,
        batch_size: 4,
        meta_batch_size: 2,
        loss: LossConfig::default(),
        seed: 3,
        ..Default::default()
    };
    let head = vec![true, true, false];

    let run = |order: &[usize]| {
        let mut params = EncoderParams::<f64>::init(cfg, 9);
        let mut theta = WeightNetParams::<f64>::init(10, 9);
        let batch: Vec<&Example> = order.iter().map(|&i| &examples[i]).collect();
        let meta_refs: Vec<&Example> = meta.iter().collect();
        train_step(&mut params, &mut theta, &batch, &meta_refs, &train_cfg, 0, &head).unwrap();
        (params, theta)
    };
    let (p1, t1) = run(&[0, 1, 2, 3]);
    let (p2, t2) = run(&[2, 0, 3, 1]);
    for (name, a) in p1.arrays() {
        for (x, y) in a.data().iter().zip(p2.get(name).data()) {
            assert!((x - y).abs() < 1e-9, "{name} diverged: {x} vs {y}");
        }
    }
    for (name, a) in t1.arrays() {
        for (x, y) in a.data().iter().zip(t2.arrays()[name].data()) {
            assert!((x - y).abs() < 1e-9, "theta {name} diverged: {x} vs {y}");
        }
    }
}

#[test]
fn constant_weights_equal_scaled_sgd() {
    // θ = 0 and beta_meta = 0: the bilevel step must match plain SGD on
    // the poly loss with the learning rate halved (all weights 0.5)
    use apam_core::experiment::fine_tune;
    use apam_core::data::Dataset;

    let cfg = ModelConfig {
        vocab: Vocab {
            hash_buckets: 64,
            lowercase: true,
        },
        embed_dim: 6,
        fc1_dim: 8,
        fc2_dim: 6,
        num_classes: 3,
        dropout_p: 0.0,
    };
    let examples: Vec<Example> = (0..6)
        .map(|i| example(i, &format!("tok{} tok{} word", i % 4, i % 3), i % 3))
        .collect();
    let meta: Vec<Example> = vec![example(20, "tok0 word", 0)];

    let train_cfg = TrainConfig {
        alpha: 0.3,
        beta_meta: 0.0,
        lr: 0.2,
        batch_size: 6,
        meta_batch_size: 1,
        steps: 10,
        loss: LossConfig::default(),
        seed: 5,
        ..Default::default()
    };

    // bilevel loop with frozen all-zero theta
    let mut bilevel = EncoderParams::<f64>::init(cfg, 9);
    let mut theta = WeightNetParams::<f64>::zeros(100);
    let head = vec![true, true, true];
    let train_set = Dataset {
        examples: examples.clone(),
        labels: vec!["0".into(), "1".into(), "2".into()],
    };
    for step in 0..train_cfg.steps {
        // mirror the sampler in meta::train
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(apam_core::textmodel::mix_seed(
            train_cfg.seed,
            0x6261_7463 ^ step as u64,
        ));
        let batch: Vec<&Example> = (0..train_cfg.batch_size)
            .map(|_| &train_set.examples[rng.gen_range(0..train_set.len())])
            .collect();
        let meta_refs: Vec<&Example> = meta.iter().collect();
        train_step(&mut bilevel, &mut theta, &batch, &meta_refs, &train_cfg, step, &head).unwrap();
    }

    // plain fine-tuning with half the learning rate
    let mut plain = EncoderParams::<f64>::init(cfg, 9);
    let plain_cfg = TrainConfig {
        lr: train_cfg.lr * 0.5,
        beta_meta: 1e-9,
        ..train_cfg
    };
    fine_tune(&train_set, &mut plain, &plain_cfg).unwrap();

    for (name, a) in bilevel.arrays() {
        for (x, y) in a.data().iter().zip(plain.get(name).data()) {
            assert!(
                (x - y).abs() < 1e-6,
                "{name}: bilevel {x} vs scaled sgd {y}"
            );
        }
    }
}
