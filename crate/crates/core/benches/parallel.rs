use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcssl::theory::{verify_excess_risk_bound, verify_unbiasedness};
use mcssl::{Exec, Rng};

fn strategies(c: &mut Criterion) {
    let rng = Rng::new(7);
    let mut g = c.benchmark_group("unbiasedness");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| verify_unbiasedness(6, 20_000, &rng, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("excess_risk");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| verify_excess_risk_bound(500, &rng, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, strategies);
criterion_main!(benches);
