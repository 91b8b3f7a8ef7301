use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qsv_core::experiment::{run_experiment, Algorithm, ExperimentConfig};
use qsv_core::hermitian::{pauli_projector_set, random_pure_target};
use qsv_core::par::{set_execution_mode, ExecutionMode};
use qsv_core::planner::{plan_ias, plan_ios};

const MODES: [(&str, ExecutionMode); 2] = [
    ("sequential", ExecutionMode::Sequential),
    ("parallel", ExecutionMode::Parallel),
];

fn planning(c: &mut Criterion) {
    let set = pauli_projector_set(2).unwrap();
    let rho0 = random_pure_target(3, 4).unwrap();
    let mut group = c.benchmark_group("plan");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution_mode(mode);
        group.bench_with_input(BenchmarkId::new("ios", name), &rho0, |b, r| {
            b.iter(|| plan_ios(r, &set, 0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ias", name), &rho0, |b, r| {
            b.iter(|| plan_ias(r, &set, 0).unwrap())
        });
    }
    group.finish();
    set_execution_mode(ExecutionMode::Parallel);
}

fn experiment(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        n_targets: 4,
        n_control_sequences: 1,
        algorithms: vec![Algorithm::IAS, Algorithm::AV, Algorithm::Random],
        ..Default::default()
    };
    let mut group = c.benchmark_group("experiment");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution_mode(mode);
        group.bench_function(name, |b| b.iter(|| run_experiment(&cfg).unwrap()));
    }
    group.finish();
    set_execution_mode(ExecutionMode::Parallel);
}

criterion_group!(benches, planning, experiment);
criterion_main!(benches);
