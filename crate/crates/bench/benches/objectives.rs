use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use disco_bench::batch;
use disco_core::constraint::{constraint_term, TrustRegionSpec};
use disco_core::objectives::{objective_value_and_gradient, ObjectiveSpec, Policies};
use disco_core::policy::stream_rng;
use disco_core::tasks::{log_spaced_difficulties, make_bank};
use disco_core::trainer::{self, TrainConfig};
use disco_core::PolicyParams;

fn objectives(c: &mut Criterion) {
    let b = batch(16, 8, 4, 4, 1);
    let policies = Policies::new(&b.theta, &b.old).with_reference(&b.old);
    let mut group = c.benchmark_group("objective_value_and_gradient");
    for name in ["grpo", "dapo", "trpa", "disco-b", "disco"] {
        let spec = ObjectiveSpec::default_for(name).unwrap();
        group.bench_function(name, |bench| {
            bench.iter(|| {
                objective_value_and_gradient(&spec, black_box(&policies), &b.groups).unwrap()
            })
        });
    }
    group.finish();
}

fn constraint(c: &mut Criterion) {
    let b = batch(16, 8, 4, 4, 2);
    let rollouts: Vec<_> = b.groups.iter().flat_map(|g| &g.rollouts).cloned().collect();
    let spec = TrustRegionSpec {
        delta: 0.0,
        ..TrustRegionSpec::default()
    };
    c.bench_function("constraint_term", |bench| {
        bench.iter(|| constraint_term(&spec, black_box(&b.theta), &b.old, &rollouts).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let profile = log_spaced_difficulties(32, 0.03, 0.9);
    let bank = make_bank(32, &profile, 4, 3, &mut stream_rng(0, u64::MAX)).unwrap();
    let theta0 = PolicyParams::uniform(bank.len(), 4, 3, 1).unwrap();
    let config = TrainConfig {
        steps: 10,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("disco_10_steps", |bench| {
        bench.iter(|| trainer::train(&config, &bank, &theta0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, objectives, constraint, training);
criterion_main!(benches);
