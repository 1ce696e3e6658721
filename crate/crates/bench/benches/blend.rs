use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use skillblend::weights::forward_full;
use skillblend::{forward, grad_loss, rollout, solve_blend, TrainConfig, Variant};
use skillblend_bench::Fixture;

fn blend(c: &mut Criterion) {
    let f = Fixture::pick_place();
    let full = f.model(Variant::Full, 32);
    let diag = f.model(Variant::Diagonal, 32);
    let sample = &f.demo.samples[80];
    let w = forward(&full.theta, sample.s, &full.arch).unwrap();

    c.bench_function("solve_blend", |b| {
        b.iter(|| solve_blend(&w.matrix, black_box(&sample.skill_outputs), &f.structure, None, skillblend::qp::DEFAULT_EPS).unwrap())
    });
    c.bench_function("forward_diag", |b| b.iter(|| forward(&diag.theta, black_box(0.4), &diag.arch).unwrap()));
    c.bench_function("forward_full", |b| b.iter(|| forward_full(&full.theta, black_box(0.4), &full.arch).unwrap()));

    let demos = std::slice::from_ref(&f.demo);
    let config = TrainConfig::default();
    let mut g = c.benchmark_group("grad_loss");
    g.sample_size(20);
    for (name, m) in [("diag", &diag), ("full", &full)] {
        g.bench_function(name, |b| b.iter(|| grad_loss(&m.theta, demos, &f.structure, &m.arch, &config).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("rollout");
    g.sample_size(20);
    for (name, m) in [("diag", &diag), ("full", &full)] {
        g.bench_function(name, |b| b.iter(|| rollout(m, &f.setup.task).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, blend);
criterion_main!(benches);
