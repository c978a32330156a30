//! Criterion benchmarks for the pipeline's hot paths: convolution, the
//! curvature channel, fusion, surface metrics, phantom generation, and a
//! whole-model forward pass at desk scale.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use avseg_core::config::RunConfig;
use avseg_core::metrics::hd95;
use avseg_core::model::SegModel;
use avseg_core::nn::attention::CrossAttentionFusion;
use avseg_core::nn::conv::Conv3d;
use avseg_core::nn::Tensor;
use avseg_core::phantom::{generate_phantom, PhantomConfig};
use avseg_core::preproc::hessian_eigen_channel;
use avseg_core::rng;
use avseg_core::volume::Grid3;

fn bench_conv3d(c: &mut Criterion) {
    let mut r = rng::stream(1, "bench.conv", 0);
    let mut conv = Conv3d::new("b.conv", 8, 8, 3, 1, &mut r);
    let x = Tensor::uniform(&[1, 8, 16, 16, 16], 1.0, &mut r);
    c.bench_function("conv3d_8c_16cube", |b| {
        b.iter(|| conv.forward(black_box(&x)).unwrap())
    });
}

fn bench_hessian_channel(c: &mut Criterion) {
    let (vol, _) = generate_phantom(&PhantomConfig {
        shape: [32, 32, 32],
        ..PhantomConfig::default()
    })
    .unwrap();
    let windowed = avseg_core::preproc::window_hu(&vol, -700.0, 300.0).unwrap();
    c.bench_function("hessian_channel_32cube", |b| {
        b.iter(|| hessian_eigen_channel(black_box(&windowed), 1.0).unwrap())
    });
}

fn bench_fusion(c: &mut Criterion) {
    let mut r = rng::stream(1, "bench.fusion", 0);
    let mut fusion = CrossAttentionFusion::new("b.fusion", 512, &mut r);
    let text = Tensor::uniform(&[4, 4, 512], 1.0, &mut r);
    let image = Tensor::uniform(&[4, 4, 512], 1.0, &mut r);
    c.bench_function("cross_attention_b4_k4_d512", |b| {
        b.iter(|| fusion.forward(black_box(&text), black_box(&image)).unwrap())
    });
}

fn bench_hd95(c: &mut Criterion) {
    let mut r = rng::stream(1, "bench.hd95", 0);
    use rand::Rng;
    let a = Grid3::from_fn([32, 32, 32], |_, _, _| r.gen::<f64>() < 0.1);
    let b_mask = Grid3::from_fn([32, 32, 32], |_, _, _| r.gen::<f64>() < 0.1);
    c.bench_function("hd95_32cube", |b| {
        b.iter(|| hd95(black_box(&a), black_box(&b_mask), [1.0, 1.0, 1.0]).unwrap())
    });
}

fn bench_phantom(c: &mut Criterion) {
    let cfg = PhantomConfig::default();
    c.bench_function("phantom_48cube", |b| {
        b.iter(|| generate_phantom(black_box(&cfg)).unwrap())
    });
}

fn bench_model_forward(c: &mut Criterion) {
    let mut cfg = RunConfig::desk();
    cfg.base_channels = 4;
    let spec = cfg.model_spec().unwrap();
    let mut r = rng::stream(1, "bench.model", 0);
    let mut model = SegModel::new(&spec, &mut r).unwrap();
    let patch = Tensor::uniform(&[1, 2, 32, 32, 32], 1.0, &mut r);
    let text = Tensor::uniform(&[4, 16], 1.0, &mut r);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward_32cube_base4", |b| {
        b.iter(|| model.forward(black_box(&patch), black_box(&text)).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_conv3d,
    bench_hessian_channel,
    bench_fusion,
    bench_hd95,
    bench_phantom,
    bench_model_forward
);
criterion_main!(benches);
