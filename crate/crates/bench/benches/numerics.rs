use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fdar::density::{bandwidth, kde};
use fdar::far::covariance_operator;
use fdar::forecast::select_k_cv;
use fdar::function_space::{eigh_operator, make_grid};
use fdar::simulation::{sample_density, stream_rng, SyntheticDesign};
use fdar::{FarMoments, GridFunction, Kernel};

fn panel(grid_n: usize, periods: usize) -> Vec<GridFunction> {
    let gen = SyntheticDesign { grid_n, ..SyntheticDesign::default() }.generator().unwrap();
    let states = gen.simulate_states(periods, 200, &mut stream_rng(1, &[])).unwrap();
    states.iter().map(|w| w.add(gen.mean()).unwrap()).collect()
}

fn eigen(c: &mut Criterion) {
    let mut group = c.benchmark_group("eigh_operator");
    for n in [128, 256, 512] {
        let densities = panel(n, 200);
        let mean = fdar::far::mean_density(&densities).unwrap();
        let states = fdar::far::demean(&densities, &mean).unwrap();
        let q = covariance_operator(&states).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &q, |b, q| b.iter(|| eigh_operator(black_box(q)).unwrap()));
    }
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let densities = panel(128, 200);
    c.bench_function("fit T=200 n=128 K=4", |b| b.iter(|| FarMoments::new(black_box(&densities)).unwrap().fit(4).unwrap()));
}

fn density_estimation(c: &mut Criterion) {
    let design = SyntheticDesign { grid_n: 512, ..SyntheticDesign::default() };
    let grid = design.grid().unwrap();
    let draws = sample_density(&design.mean_density().unwrap(), 1000, 3).unwrap();
    let mut group = c.benchmark_group("kde N=1000 n=512");
    for kernel in [Kernel::Epanechnikov, Kernel::Normal] {
        let h = bandwidth(1.0, draws.len(), kernel).unwrap();
        group.bench_function(kernel.to_string(), |b| b.iter(|| kde(black_box(&draws), &grid, kernel, h).unwrap()));
    }
    group.finish();
    let uniform = GridFunction::constant(&make_grid(0.0, 1.0, 512).unwrap(), 1.0);
    c.bench_function("sample N=1000", |b| b.iter(|| sample_density(black_box(&uniform), 1000, 5).unwrap()));
}

fn cross_validation(c: &mut Criterion) {
    let densities = panel(64, 100);
    let mut group = c.benchmark_group("select_k_cv");
    group.sample_size(20);
    group.bench_function("T=100 n=64 K=1..8", |b| {
        b.iter(|| select_k_cv(black_box(&densities), &[1, 2, 3, 4, 5, 6, 7, 8], 5).unwrap())
    });
    group.finish();
}

criterion_group!(benches, eigen, fitting, density_estimation, cross_validation);
criterion_main!(benches);
