use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use curvequiv::{d_inf, d_inf_inf, fit_constrained, fit_mle, test_one, DistanceTarget, TestConfig};
use curvequiv_bench::scenario_a;

fn distance(c: &mut Criterion) {
    let f = scenario_a(false);
    let range = f.design.dose_range();
    c.bench_function("d_inf", |b| {
        b.iter(|| d_inf(black_box(&f.truth), f.design.weights(), 0, range).unwrap())
    });
    c.bench_function("d_inf_inf", |b| {
        b.iter(|| d_inf_inf(black_box(&f.truth), f.design.weights(), &[0, 1, 2], range).unwrap())
    });
}

fn estimation(c: &mut Criterion) {
    for fixed in [true, false] {
        let f = scenario_a(fixed);
        let name = if fixed { "fixed_hill" } else { "full" };
        c.bench_function(&format!("fit_mle/{name}"), |b| {
            b.iter(|| fit_mle(black_box(&f.data), &f.design, &f.specs).unwrap())
        });
        c.bench_function(&format!("fit_constrained/{name}"), |b| {
            b.iter(|| {
                fit_constrained(
                    black_box(&f.data),
                    &f.design,
                    &f.specs,
                    &DistanceTarget::One(0),
                    0.1,
                )
            })
        });
    }
}

fn bootstrap(c: &mut Criterion) {
    let f = scenario_a(true);
    let config = TestConfig {
        delta: 0.1,
        alpha: 0.1,
        b: 20,
        seed: 3,
        target: DistanceTarget::One(0),
    };
    let mut group = c.benchmark_group("bootstrap");
    group.sample_size(10);
    group.bench_function("test_one_b20", |b| {
        b.iter(|| test_one(black_box(&f.data), &f.design, &f.specs, &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, distance, estimation, bootstrap);
criterion_main!(benches);
