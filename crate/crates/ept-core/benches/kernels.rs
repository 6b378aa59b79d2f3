//! Kernel benchmarks. With the default `parallel` feature the matmul
//! benches compare the rayon path against the sequential fallback directly;
//! run the whole suite again with `--no-default-features` for the fully
//! sequential build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ept_core::experts::{init_bank, project_expert};
use ept_core::numeric::ops::matmul_seq;
use ept_core::numeric::{transposed_conv2d, Matrix};
use ept_core::subspace::init_subspace;
use std::hint::black_box;

fn filled(rows: usize, cols: usize, salt: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f64 * salt).sin())
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 192, 384] {
        let a = filled(n, n, 0.37);
        let b = filled(n, n, 0.73);
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| black_box(matmul_seq(black_box(&a), black_box(&b))))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| {
                black_box(ept_core::numeric::ops::matmul_par(black_box(&a), black_box(&b)))
            })
        });
    }
    group.finish();
}

fn bench_deconv(c: &mut Criterion) {
    let mut group = c.benchmark_group("transposed_conv2d");
    for &s in &[2usize, 8] {
        let seed = filled(768usize.div_ceil(s), 768usize.div_ceil(s), 0.41);
        let kernel = filled(s, s, 0.29);
        group.bench_with_input(BenchmarkId::new("stride_eq_kernel", s), &s, |bench, _| {
            bench.iter(|| black_box(transposed_conv2d(black_box(&seed), black_box(&kernel), s)))
        });
    }
    // overlapping case exercises the scatter path
    let seed = filled(96, 96, 0.53);
    let kernel = filled(4, 4, 0.61);
    group.bench_function("overlapping_stride_2", |bench| {
        bench.iter(|| black_box(transposed_conv2d(black_box(&seed), black_box(&kernel), 2)))
    });
    group.finish();
}

fn bench_expert_projection(c: &mut Criterion) {
    // the full slice -> expand -> crop pipeline at the published scale
    let ms = init_subspace(384, 384, 8, 0.02, 7).unwrap();
    let mut bank = init_bank(&[2, 2, 4, 4, 6, 6, 8, 8], 768, 768).unwrap();
    for i in 0..bank.len() {
        let s = bank.expert(i).scale();
        for p in 0..s {
            for q in 0..s {
                bank.expert_mut(i).kernel_mut().set(p, q, 0.1 * (p + q) as f64);
            }
        }
    }
    let mut group = c.benchmark_group("project_expert");
    for &i in &[0usize, 7] {
        let s = bank.expert(i).scale();
        group.bench_with_input(BenchmarkId::new("scale", s), &i, |bench, &i| {
            bench.iter(|| black_box(project_expert(&ms, bank.expert(i), 768, 768)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_deconv, bench_expert_projection);
criterion_main!(benches);
