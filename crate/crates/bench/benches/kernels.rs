use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use capsbench::autodiff::{squash_tensor, Padding, Tape};
use capsbench::baselines::{FisherfaceModel, LeNet, LeNetConfig};
use capsbench::capsnet::{route_u_hat, CapsNet, CapsNetConfig};
use capsbench::data::synth_gaussians;
use capsbench::model::{Classifier, NeuralModel};
use capsbench_bench::{pattern, shapes};

fn tensor_ops(c: &mut Criterion) {
    let vectors = pattern(&[10_000, 16], 1).map(|v| v * 10.0);
    c.bench_function("squash 10^4 x 16", |b| b.iter(|| squash_tensor(black_box(&vectors))));

    let image = pattern(&[8, 64, 64, 1], 2);
    let kernel = pattern(&[5, 5, 1, 16], 3);
    c.bench_function("conv2d 8x64x64x1 * 5x5x1x16 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(image.clone());
            let k = tape.constant(kernel.clone());
            let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
            let loss = tape.sum_all(y);
            black_box(tape.backward(loss).unwrap());
        })
    });

    let u_hat = pattern(&[1152, 10, 16], 4).map(|v| v * 0.1);
    c.bench_function("routing 1152 -> 10 x 16, 3 iterations", |b| {
        b.iter(|| route_u_hat(black_box(&u_hat), 3).unwrap())
    });
}

fn models(c: &mut Criterion) {
    let samples = shapes(16, 64);
    let batch: Vec<_> = samples.iter().collect();

    let lenet = LeNet::build(LeNetConfig::new(64, 64, 4), 1).unwrap();
    c.bench_function("lenet predict 64x64", |b| b.iter(|| lenet.predict(&samples[0].image).unwrap()));
    c.bench_function("lenet gradient, batch 16", |b| {
        b.iter_batched(
            || lenet.clone(),
            |mut m| m.batch_gradient(&batch, None).unwrap(),
            BatchSize::LargeInput,
        )
    });

    let mut cfg = CapsNetConfig::new(64, 64, 4);
    cfg.stem_maps = 16;
    let caps = CapsNet::build(cfg, 1).unwrap();
    c.bench_function("capsnet predict 64x64", |b| b.iter(|| caps.predict(&samples[0].image).unwrap()));
    c.bench_function("capsnet gradient, batch 16", |b| {
        b.iter_batched(
            || caps.clone(),
            |mut m| m.batch_gradient(&batch, None).unwrap(),
            BatchSize::LargeInput,
        )
    });

    let (rows, labels) = synth_gaussians(10, 400, 20, 5.0, 1);
    c.bench_function("fisherfaces fit, 200 x 400", |b| {
        b.iter(|| FisherfaceModel::fit_rows(&rows, &labels, 100, &[20, 20]).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tensor_ops, models
}
criterion_main!(benches);
