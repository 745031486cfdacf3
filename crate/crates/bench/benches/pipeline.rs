use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nextchannel_core::model::{FeatureMap, ModelConfig, NextChannelEncoder};
use nextchannel_core::matrix::Matrix;
use nextchannel_core::phenotype::{cluster, ClusterConfig};
use nextchannel_core::rng;
use nextchannel_core::train::nt_xent_with_grad;
use rand::Rng;

fn random_patch(channels: usize, size: usize, seed: u64) -> FeatureMap {
    let mut r = rng::stream(seed, &[]);
    FeatureMap::from_vec(channels, size, size, (0..channels * size * size).map(|_| r.random_range(0.0..1.0)).collect())
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    for channels in [8usize, 34] {
        let cfg = ModelConfig::for_channels(channels);
        let enc = NextChannelEncoder::build(&cfg, 0).unwrap();
        let patch = random_patch(channels, 16, 1);
        group.bench_with_input(BenchmarkId::from_parameter(channels), &patch, |b, p| {
            b.iter(|| enc.forward(black_box(p)).unwrap())
        });
    }
    group.finish();
}

fn nt_xent(c: &mut Criterion) {
    let mut r = rng::stream(2, &[]);
    let (patches, views, dim) = (256usize, 4usize, 128usize);
    let rows: Vec<Vec<f32>> = (0..patches * views)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let pairs: Vec<usize> = (0..patches * views).map(|i| i / views).collect();
    c.bench_function("nt_xent_with_grad_1024x128", |b| {
        b.iter(|| nt_xent_with_grad(black_box(&rows), &pairs, 0.5).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let mut r = rng::stream(3, &[]);
    let (n, dim, centres) = (2000usize, 32usize, 5usize);
    let data: Vec<f32> = (0..n)
        .flat_map(|i| {
            let centre = i % centres;
            (0..dim).map(|d| if d % centres == centre { 3.0 } else { 0.0 } + r.random_range(-0.5..0.5)).collect::<Vec<_>>()
        })
        .collect();
    let points = Matrix::new(n, dim, data).unwrap();
    let cfg = ClusterConfig::default();
    let mut group = c.benchmark_group("cluster");
    group.sample_size(10);
    group.bench_function("2000x32", |b| b.iter(|| cluster(black_box(&points), &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, encoder_forward, nt_xent, clustering);
criterion_main!(benches);
