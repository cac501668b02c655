use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ivcf_bench::{policy_instance, step_frame};
use ivcf_core::forest::{grow_regression_forest, ForestInput};
use ivcf_core::policy::{allocate_capacity, learn_policy_tree_columns};
use ivcf_core::{fit_iv_forest, TreeParams};

fn single_tree(c: &mut Criterion) {
    // one deep tree: dominated by split search and partitioning
    let mut group = c.benchmark_group("regression_tree");
    for n in [5_000, 20_000] {
        let frame = step_frame(n, 10);
        let input = ForestInput::from_frame(&frame);
        let params = TreeParams {
            n_trees: 1,
            bag_size: 1,
            ..TreeParams::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| grow_regression_forest(black_box(&input), frame.outcome(), &params).unwrap())
        });
    }
    group.finish();
}

fn iv_forest(c: &mut Criterion) {
    let frame = step_frame(2_000, 5);
    let params = TreeParams {
        n_trees: 100,
        ..TreeParams::default()
    };
    let mut group = c.benchmark_group("iv_forest");
    group.sample_size(10);
    group.bench_function("fit_2000x5_100_trees", |b| {
        b.iter(|| fit_iv_forest(black_box(&frame), &params, true).unwrap())
    });
    let model = fit_iv_forest(&frame, &params, true).unwrap();
    let points: Vec<Vec<f64>> = (0..500).map(|i| frame.row(i)).collect();
    group.bench_function("predict_500_points", |b| {
        b.iter(|| model.predict_points(black_box(&points)).unwrap())
    });
    group.finish();
}

fn policy(c: &mut Criterion) {
    let mut group = c.benchmark_group("policy_tree");
    group.sample_size(10);
    for n in [200, 1_000] {
        let (x, r) = policy_instance(n, 3, 5);
        let names: Vec<String> = (1..=3).map(|j| format!("x{j}")).collect();
        group.bench_with_input(BenchmarkId::new("depth2", n), &n, |b, _| {
            b.iter(|| learn_policy_tree_columns(black_box(&x), &names, &r, 2).unwrap())
        });
    }
    group.finish();
}

fn allocation(c: &mut Criterion) {
    let (_, r) = policy_instance(50_000, 0, 9);
    c.bench_function("allocate_top_5000_of_50000", |b| {
        b.iter(|| allocate_capacity(black_box(&r), 5_000).unwrap())
    });
}

criterion_group!(benches, single_tree, iv_forest, policy, allocation);
criterion_main!(benches);
