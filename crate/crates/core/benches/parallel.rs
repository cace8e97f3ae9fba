//! Serial vs rayon paths: whole Monte Carlo runs (parallel over replications)
//! and the variance kernel on one large panel (parallel over cells).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use twoway_sketch::moments::{mean_inference, Fields, VarianceMode};
use twoway_sketch::par::Execution;
use twoway_sketch::simulate::{run_experiments, DesignSpec};
use twoway_sketch::sketch::{PRule, SketchMask};

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_experiments");
    group.sample_size(10);
    let rules = [PRule::Full, PRule::COverCbar(1.0)];
    for n in [40, 80] {
        let design = DesignSpec::builtin(2, n, n).unwrap();
        for exec in [Execution::Serial, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), n), &design, |b, d| {
                b.iter(|| run_experiments(d, &rules, 100, VarianceMode::FullSample, 1, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn variance_kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("mean_inference_full_panel");
    group.sample_size(20);
    let panel = DesignSpec::builtin(1, 600, 600).unwrap().draw(3).unwrap();
    let mask = SketchMask::full(&panel);
    let field = Fields(vec![0]);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    group.bench_function("one_thread", |b| {
        b.iter(|| single.install(|| mean_inference(black_box(&panel), &mask, &field, 0.05, VarianceMode::Subsample)))
    });
    group.bench_function("default_pool", |b| {
        b.iter(|| mean_inference(black_box(&panel), &mask, &field, 0.05, VarianceMode::Subsample))
    });
    group.finish();
}

criterion_group!(benches, monte_carlo, variance_kernel);
criterion_main!(benches);
