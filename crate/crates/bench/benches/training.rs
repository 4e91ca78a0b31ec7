//! Throughput benchmarks for the training hot paths: the bilevel step,
//! plain fine-tuning, the weight net forward/jacobian pass, and one
//! contrastive pre-training pass.

use criterion::{criterion_group, criterion_main, Criterion};

use apam_core::data::synth::{self, SynthConfig};
use apam_core::data::Example;
use apam_core::losses::{LossConfig, LossKind};
use apam_core::meta::{head_classes, train_step, weight_net_forward, TrainConfig, WeightNetParams};
use apam_core::pretrain::{pretrain, PretrainConfig};
use apam_core::textmodel::{EncoderParams, ModelConfig, Vocab};

fn bench_model(num_classes: usize) -> ModelConfig {
    ModelConfig {
        vocab: Vocab {
            hash_buckets: 2048,
            lowercase: true,
        },
        embed_dim: 32,
        fc1_dim: 48,
        fc2_dim: 32,
        num_classes,
        dropout_p: 0.1,
    }
}

fn bench_task() -> apam_core::data::Dataset {
    synth::generate(&SynthConfig {
        num_classes: 10,
        examples_per_class: 32,
        seed: 7,
        ..Default::default()
    })
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        alpha: 0.5,
        beta_meta: 0.1,
        lr: 0.01,
        steps: 1,
        batch_size: 32,
        meta_batch_size: 16,
        loss: LossConfig {
            kind: LossKind::Poly,
            ..Default::default()
        },
        weight_net_hidden: 100,
        seed: 7,
    }
}

fn bilevel_step(c: &mut Criterion) {
    let data = bench_task();
    let mut params = EncoderParams::<f32>::init(bench_model(10), 7);
    let mut theta = WeightNetParams::<f32>::init(100, 7);
    let cfg = train_cfg();
    let head = head_classes(&data);
    let train_batch: Vec<&Example> = data.examples.iter().take(32).collect();
    let meta_batch: Vec<&Example> = data.examples.iter().skip(32).take(16).collect();
    c.bench_function("bilevel_train_step_b32", |b| {
        b.iter(|| {
            train_step(
                &mut params,
                &mut theta,
                &train_batch,
                &meta_batch,
                &cfg,
                0,
                &head,
            )
            .unwrap()
        })
    });
}

fn weight_net(c: &mut Criterion) {
    let theta = WeightNetParams::<f32>::init(100, 7);
    let losses: Vec<f32> = (0..32).map(|i| 0.1 * i as f32).collect();
    c.bench_function("weight_net_forward_b32", |b| {
        b.iter(|| weight_net_forward(&losses, &theta).unwrap())
    });
}

fn contrastive_pass(c: &mut Criterion) {
    let data = bench_task();
    let corpus: Vec<String> = data.examples.iter().take(64).map(|e| e.text.clone()).collect();
    let cfg = PretrainConfig {
        batch_size: 32,
        epochs: 1,
        tau: 0.05,
        lr: 1e-3,
        seed: 7,
    };
    c.bench_function("contrastive_epoch_n64_b32", |b| {
        b.iter(|| {
            let mut params = EncoderParams::<f32>::init(bench_model(10), 7);
            pretrain(&corpus, &mut params, &cfg).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bilevel_step, weight_net, contrastive_pass
}
criterion_main!(benches);
