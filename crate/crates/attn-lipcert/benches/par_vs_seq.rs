use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use attn_lipcert::sweep::{
    run_bounds_sweep, run_bounds_sweep_seq, run_simplex_sweep, run_simplex_sweep_seq, SimplexSweepConfig,
    SweepConfig,
};

fn bounds_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("bounds_sweep");
    group.sample_size(10);
    for instances in [16usize, 64] {
        let cfg = SweepConfig {
            instances,
            ..SweepConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("pool", instances), &cfg, |b, cfg| {
            b.iter(|| run_bounds_sweep(cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", instances), &cfg, |b, cfg| {
            b.iter(|| run_bounds_sweep_seq(cfg).unwrap())
        });
    }
    group.finish();
}

fn simplex_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("simplex_sweep");
    group.sample_size(10);
    for draws in [256usize, 2048] {
        let cfg = SimplexSweepConfig {
            draws,
            ..SimplexSweepConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("pool", draws), &cfg, |b, cfg| {
            b.iter(|| run_simplex_sweep(cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", draws), &cfg, |b, cfg| {
            b.iter(|| run_simplex_sweep_seq(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bounds_sweep, simplex_sweep);
criterion_main!(benches);
