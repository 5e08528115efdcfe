use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use magcal_bench::fixture;
use magcal_core::baselines::{tolles_lawson_calibrate, twostep_calibrate};
use magcal_core::{calibrate, SolverConfig, TlConfig, WeightConfig};
use std::hint::black_box;

fn factor_graph(c: &mut Criterion) {
    let mut group = c.benchmark_group("factor-graph");
    group.sample_size(10);
    for steps in [100, 300, 600] {
        let meas = fixture(1, steps);
        group.bench_with_input(BenchmarkId::from_parameter(steps), &meas, |b, m| {
            b.iter(|| calibrate(black_box(m), &WeightConfig::default(), &SolverConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn baselines(c: &mut Criterion) {
    let meas = fixture(1, 600);
    c.bench_function("twostep/600", |b| {
        b.iter(|| twostep_calibrate(black_box(&meas), 50_000.0).unwrap())
    });
    let cfg = TlConfig::default();
    c.bench_function("tolles-lawson/600", |b| {
        b.iter(|| tolles_lawson_calibrate(black_box(&meas), &cfg).unwrap())
    });
}

criterion_group!(benches, factor_graph, baselines);
criterion_main!(benches);
