//! Sequential vs data-parallel kernels. The public entry points dispatch to
//! rayon under the default `parallel` feature; the `_seq` variants are the
//! always-available fallback, so this suite measures what the feature buys.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cardforge::baselines::{true_count, true_count_seq};
use cardforge::bn::{pairwise_mi, pairwise_mi_seq};
use cardforge::ndv::{generate_training_set, generate_training_set_seq, GeneratorConfig};
use cardforge::query::parse;
use cardforge::synth::TreeTableSpec;

fn bench_pairwise_mi(c: &mut Criterion) {
    let table = TreeTableSpec::random("bench", 42).generate(20_000, 7);
    let mut group = c.benchmark_group("pairwise_mi");
    group.bench_function("seq", |b| b.iter(|| black_box(pairwise_mi_seq(&table))));
    group.bench_function("par", |b| b.iter(|| black_box(pairwise_mi(&table))));
    group.finish();
}

fn bench_oracle_scan(c: &mut Criterion) {
    let table = TreeTableSpec::chain("bench", &[4, 5, 3, 6], 0.3).generate(50_000, 3);
    let q = parse("SELECT COUNT(*) FROM bench WHERE c0 = '1' AND c2 = '2'").unwrap();
    let mut group = c.benchmark_group("oracle_scan");
    group.bench_function("seq", |b| {
        b.iter(|| black_box(true_count_seq(&table, &q.predicate).unwrap()))
    });
    group.bench_function("par", |b| {
        b.iter(|| black_box(true_count(&table, &q.predicate).unwrap()))
    });
    group.finish();
}

fn bench_training_set(c: &mut Criterion) {
    let cfg = GeneratorConfig {
        examples: 40,
        population_range: (1_000, 50_000),
        ..GeneratorConfig::default()
    };
    let mut group = c.benchmark_group("ndv_training_set");
    group.sample_size(10);
    group.bench_function("seq", |b| {
        b.iter(|| black_box(generate_training_set_seq(&cfg, 5)))
    });
    group.bench_function("par", |b| {
        b.iter(|| black_box(generate_training_set(&cfg, 5)))
    });
    group.finish();
}

criterion_group!(benches, bench_pairwise_mi, bench_oracle_scan, bench_training_set);
criterion_main!(benches);
