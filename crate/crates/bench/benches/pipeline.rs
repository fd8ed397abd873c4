use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use canfusion::ml::metrics::roc_auc;
use canfusion::ml::{train_dt, train_rf};
use canfusion::spatial::extract_pe;
use canfusion::temporal::temporal_features;
use canfusion::{ForestParams, TreeParams};
use canfusion_bench::{fused, frames, predictor};

fn temporal(c: &mut Criterion) {
    let stream = frames(200_000);
    c.bench_function("temporal_features 200k frames", |b| {
        b.iter(|| temporal_features(black_box(&stream), 7500).unwrap())
    });
}

fn prediction_errors(c: &mut Criterion) {
    let stream = frames(50_000);
    let model = predictor(20_000);
    c.bench_function("extract_pe 50k frames", |b| b.iter(|| extract_pe(&model, black_box(&stream))));
}

fn trees(c: &mut Criterion) {
    let m = fused(20_000);
    let mut g = c.benchmark_group("classifiers 20k x 21");
    g.sample_size(10);
    g.bench_function("decision tree depth 12", |b| {
        let params = TreeParams { max_depth: Some(12), ..TreeParams::default() };
        b.iter(|| train_dt(&m.values, &m.labels, &params).unwrap())
    });
    g.bench_function("random forest 10 trees", |b| {
        let params = ForestParams { n_trees: 10, ..ForestParams::default() };
        b.iter(|| train_rf(&m.values, &m.labels, &params).unwrap())
    });
    g.finish();
}

fn auc(c: &mut Criterion) {
    let m = fused(100_000);
    let scores = m.values.column(20);
    c.bench_function("roc_auc 100k", |b| {
        b.iter_batched(|| scores.clone(), |s| roc_auc(&s, &m.labels), BatchSize::LargeInput)
    });
}

criterion_group!(benches, temporal, prediction_errors, trees, auc);
criterion_main!(benches);
