use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use simfed_core::data::{gen_synthetic_classification, partition_iid, ToySine};
use simfed_core::models::{Activation, MlpModel, RbfFeatureModel};
use simfed_core::{run_training, ExecMode, Model, TrainingConfig};

fn modes() -> [(&'static str, ExecMode); 2] {
    [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)]
}

fn toy_round(c: &mut Criterion) {
    let data = ToySine::default().generate(1).unwrap();
    let model = Model::Rbf(RbfFeatureModel::sample(100, 0.08, 2).unwrap());
    let mut g = c.benchmark_group("toy_rbf_k5_one_age");
    for (name, exec) in modes() {
        let cfg = TrainingConfig { k: 5, ages: 1, clients_per_round: 50, exec, ..TrainingConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_training(&model, &data, &cfg).unwrap()));
    }
    g.finish();
}

fn mlp_round(c: &mut Criterion) {
    let pool = gen_synthetic_classification(10, 100, 16, 0.3, 3).unwrap();
    let data = partition_iid(&pool, 20, 4).unwrap();
    let model = Model::Mlp(MlpModel::new(vec![16, 64, 10], Activation::Tanh, data.task).unwrap());
    let mut g = c.benchmark_group("mlp_k5_one_age");
    g.sample_size(10);
    for (name, exec) in modes() {
        let cfg = TrainingConfig { k: 5, ages: 1, clients_per_round: 20, eta: 0.5, exec, ..TrainingConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_training(&model, &data, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, toy_round, mlp_round);
criterion_main!(benches);
