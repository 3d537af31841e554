//! Parallel vs sequential throughput of the hot paths.
//!
//! Each benchmark runs twice: with the rayon path and with
//! `par::set_sequential(true)`. Build with `--no-default-features` to
//! compile rayon out entirely.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehit::data::ssim;
use rehit::hist_attention::{attention_forward, histogram_partition};
use rehit::kernels::{conv2d_forward, ConvGeom};
use rehit::model::{build_model, ModelConfig};
use rehit::par;
use rehit::tape::Tape;
use rehit::tensor::Tensor;
use rehit::training::{total_loss, LossWeights};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, [4, 32, 64, 64]);
    let w = rand_tensor(&mut rng, [32, 32, 3, 3]);
    let dw = rand_tensor(&mut rng, [32, 1, 3, 3]);
    let mut g = c.benchmark_group("conv2d_4x32x64x64");
    for (mode, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::new("dense3x3", mode), |b| {
            b.iter(|| conv2d_forward(black_box(&x), &w, None, ConvGeom::new(1, 1, 1)).unwrap())
        });
        g.bench_function(BenchmarkId::new("depthwise3x3", mode), |b| {
            b.iter(|| conv2d_forward(black_box(&x), &dw, None, ConvGeom::depthwise(32, 1, 1)).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, ch, heads, side) = (2, 16, 2, 32);
    let [q, k, v] = [0, 1, 2].map(|_| rand_tensor(&mut rng, [n, ch, side, side]));
    let parts: Vec<_> = (0..n * heads)
        .map(|_| {
            let keys: Vec<f32> = (0..side * side).map(|_| rng.random()).collect();
            histogram_partition(&keys, 16).unwrap()
        })
        .collect();
    let parts = Arc::new(parts);
    let mut g = c.benchmark_group("hist_attention_2x16x32x32_b16");
    for (mode, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(mode, |b| {
            b.iter(|| attention_forward(black_box(&q), &k, &v, heads, &parts).unwrap())
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let model = build_model::<f32>(&ModelConfig::tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn([2, 3, 64, 64], |_| rng.random_range(0.0..1.0f32));
    let y = x.map(|v| (v * 1.2).min(1.0));
    let weights = LossWeights::default();
    let mut g = c.benchmark_group("tiny_model_forward_backward_2x64x64");
    g.sample_size(10);
    for (mode, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(mode, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let yv = tape.input(y.clone());
                let out = model.forward(&mut tape, xv).unwrap();
                let loss = total_loss(&mut tape, &out, yv, &weights).unwrap();
                tape.backward(loss.total).unwrap();
                black_box(tape.value(loss.total).data()[0])
            })
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::from_fn([4, 3, 128, 128], |_| rng.random_range(0.0..1.0f64));
    let b = a.map(|v| (v + 0.05).min(1.0));
    let mut g = c.benchmark_group("ssim_4x3x128x128");
    for (mode, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(mode, |bench| bench.iter(|| ssim(black_box(&a), &b).unwrap()));
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, conv, attention, train_step, metrics);
criterion_main!(benches);
