use advlab::attacks::{attack, AttackConfig, AttackKind};
use advlab::detect::{probe, ProbeParams};
use advlab::grad::probs_vjp;
use advlab::network::build_mnist_cnn;
use advlab::{Checkpoint, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn digit_like() -> Vec<f64> {
    (0..784)
        .map(|i| {
            let (r, c) = ((i / 28) as f64 - 13.5, (i % 28) as f64 - 13.5);
            if (r * r + c * c).sqrt() < 8.0 {
                0.8
            } else {
                -1.0
            }
        })
        .collect()
}

fn kernels(c: &mut Criterion) {
    let ckpt = Checkpoint::init(build_mnist_cnn(0.25).unwrap(), 1);
    let x = digit_like();
    let xt = Tensor::new(vec![1, 28, 28], x.clone()).unwrap();
    let model = ckpt.model();

    c.bench_function("cnn_forward", |b| b.iter(|| model.logits(black_box(&x))));

    let mut seed = vec![0.0; 10];
    seed[3] = 1.0;
    c.bench_function("cnn_vjp", |b| b.iter(|| probs_vjp(model, black_box(&xt), 1.0, &seed).unwrap()));

    let mut group = c.benchmark_group("detection");
    group.sample_size(10);
    let params = ProbeParams::default();
    group.bench_function("probe", |b| b.iter(|| probe(&ckpt, black_box(&x), &params).unwrap()));
    let target = (model.predict(&x) + 1) % 10;
    let cfg = AttackConfig {
        budget: Some(10.0),
        ..AttackConfig::targeted(AttackKind::P, target)
    };
    group.bench_function("p_attack_10_flips", |b| b.iter(|| attack(&ckpt, black_box(&x), &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
