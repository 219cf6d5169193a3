use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use etfcd_core::assignment::solve_min;
use etfcd_core::discovery::{kmeans, select_confident};
use etfcd_core::losses::{sup_contrastive, unsup_contrastive};
use etfcd_core::numkit::householder_qr;
use etfcd_core::{Activation, Encoder, EtfFrame, LossConfig, Matrix, Rng};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_vec(rows, cols, rng.gaussian_vec(rows * cols)).unwrap()
}

fn unit_rows(m: Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = m
        .row_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn frame(c: &mut Criterion) {
    let mut g = c.benchmark_group("etf_build");
    for (d, k) in [(32, 20), (128, 100), (512, 100)] {
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{d}x{k}")),
            &(d, k),
            |b, &(d, k)| b.iter(|| EtfFrame::build(black_box(d), k, 7).unwrap()),
        );
    }
    g.finish();

    let a = gaussian(256, 64, 1);
    c.bench_function("householder_qr_256x64", |b| {
        b.iter(|| householder_qr(black_box(&a)).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let points = gaussian(1000, 32, 2);
    c.bench_function("kmeans_1000x32_k10", |b| {
        b.iter(|| kmeans(black_box(&points), 10, 3, 100).unwrap())
    });

    let logits = gaussian(1000, 20, 3);
    let probs = Matrix::from_rows(
        &logits
            .row_iter()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    c.bench_function("select_confident_1000", |b| {
        b.iter(|| select_confident(black_box(&probs), 0.7).unwrap())
    });

    let cost = gaussian(64, 64, 4);
    c.bench_function("hungarian_64", |b| b.iter(|| solve_min(black_box(&cost)).unwrap()));
}

fn training(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let a = unit_rows(gaussian(64, 32, 5));
    let v = unit_rows(gaussian(64, 32, 6));
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    c.bench_function("unsup_contrastive_64x32", |b| {
        b.iter(|| unsup_contrastive(black_box(&a), &v, &cfg).unwrap())
    });
    c.bench_function("sup_contrastive_64x32", |b| {
        b.iter(|| sup_contrastive(black_box(&a), &labels, &cfg).unwrap())
    });

    let mut rng = Rng::new(8);
    let enc = Encoder::new(&[32, 64, 32], Activation::LeakyRelu(0.01), &mut rng).unwrap();
    let x = gaussian(64, 32, 9);
    let grad = gaussian(64, 32, 10);
    c.bench_function("encoder_step_64", |b| {
        b.iter(|| {
            let (out, cache) = enc.forward(black_box(&x)).unwrap();
            black_box(out);
            enc.backward(&cache, &grad).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = frame, clustering, training
}
criterion_main!(benches);
