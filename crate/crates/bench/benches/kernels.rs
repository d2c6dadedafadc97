use std::hint::black_box;

use care_core::moments::{self, PrecisionEstimate};
use care_core::partition;
use care_core::pipeline;
use care_core::splr::{self, SplrParams};
use care_core::synth::{self, PlantedGraphConfig, RegimeBConfig};
use care_core::tensor::{self, CpOptions};
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;

fn planted() -> synth::SynthData {
    synth::gen_planted_graph(&PlantedGraphConfig::default()).unwrap()
}

fn bench_splr(c: &mut Criterion) {
    let d = planted();
    let (z, _) = care_core::dataio::standardize(&d.matrix).unwrap();
    let prec = moments::precision(&moments::covariance(&z)).unwrap();
    c.bench_function("splr_decompose_p12", |b| b.iter(|| splr::decompose(black_box(&prec), &SplrParams::new(0.1, 0.1)).unwrap()));
    let theta = PrecisionEstimate::from_matrix(DMatrix::identity(36, 36) * 2.0).unwrap();
    c.bench_function("splr_decompose_p36", |b| b.iter(|| splr::decompose(black_box(&theta), &SplrParams::default()).unwrap()));
}

fn bench_cp(c: &mut Criterion) {
    let d = synth::gen_regime_b(&RegimeBConfig::default()).unwrap();
    let (x, _) = care_core::dataio::standardize(&d.matrix).unwrap();
    let t = moments::third_moment(&x, &d.partition).unwrap();
    let opts = CpOptions { restarts: 4, ..CpOptions::default() };
    c.bench_function("cp_rank4_12x12x12", |b| b.iter(|| tensor::cp_decompose_with(black_box(&t), &opts).unwrap()));
}

fn bench_posterior(c: &mut Criterion) {
    let d = planted();
    let cov = d.noise_cov.clone();
    c.bench_function("responsibilities_n10000_p12", |b| {
        b.iter(|| tensor::responsibilities(black_box(&d.matrix), &d.means, &d.weights, &cov).unwrap())
    });
}

fn bench_partition(c: &mut Criterion) {
    let d = planted();
    let (_, dec) = pipeline::decompose_scores(&d.matrix, &SplrParams::new(0.1, 0.1)).unwrap();
    c.bench_function("partition_p12", |b| {
        b.iter(|| partition::partition(black_box(&dec.s), partition::DEFAULT_EPS, 0, partition::DEFAULT_RESTARTS).unwrap())
    });
}

criterion_group!(benches, bench_splr, bench_cp, bench_posterior, bench_partition);
criterion_main!(benches);
