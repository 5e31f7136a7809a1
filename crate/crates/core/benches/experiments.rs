use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use llmregress::driftsim::{
    calibration_experiment, power_experiment, synthetic_dataset, DriftSpec, SyntheticModelSpec,
};
use llmregress::par::Execution;
use llmregress::regress::{Metric, RegressionTest};

const TRIALS: usize = 100;

fn experiments(c: &mut Criterion) {
    let dataset = synthetic_dataset("bench", 200, &[]);
    let null = DriftSpec::null(SyntheticModelSpec::new("base", 0, 0.8));
    let drop = DriftSpec { base_delta: -0.1, ..null.clone() };
    let accuracy = RegressionTest::new("accuracy", vec![], Metric::Accuracy);
    let f1 = RegressionTest::new("f1", vec![], Metric::F1);

    let mut group = c.benchmark_group("experiments");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new("calibration", name), &exec, |b, &exec| {
            b.iter(|| calibration_experiment(&null, &accuracy, &dataset, TRIALS, 1, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("power", name), &exec, |b, &exec| {
            b.iter(|| power_experiment(&drop, &accuracy, &dataset, TRIALS, 1, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("power_f1_bootstrap", name), &exec, |b, &exec| {
            b.iter(|| power_experiment(&drop, &f1, &dataset, TRIALS / 10, 1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, experiments);
criterion_main!(benches);
