use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use envae::data::{stratified_split, synthetic_hdlss, DEFAULT_FRACTIONS};
use envae::parallel::Execution;
use envae::training::{cross_validate, eval_downstream, ClassifierConfig, TrainConfig};

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn folds(c: &mut Criterion) {
    let ds = synthetic_hdlss(80, 200, 4, 3, 0.5, 1).unwrap().dataset;
    let mut group = c.benchmark_group("cross_validate");
    group.sample_size(10);
    for (name, exec) in modes() {
        let mut cfg = TrainConfig::default();
        cfg.model.n_groups = 2;
        cfg.max_epochs = 10;
        cfg.patience = 5;
        cfg.execution = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| cross_validate(&ds, &cfg).unwrap())
        });
    }
    group.finish();
}

fn classifier_seeds(c: &mut Criterion) {
    let ds = synthetic_hdlss(100, 200, 4, 3, 0.5, 2).unwrap().dataset;
    let plan = stratified_split(&ds.y, 3, DEFAULT_FRACTIONS, 2).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model.n_groups = 2;
    cfg.max_epochs = 5;
    cfg.patience = 5;
    let model = envae::training::train_fold(&ds, &plan, &cfg).unwrap();
    let x = model.scaler.transform(&ds.x).unwrap();
    let clf = ClassifierConfig {
        max_epochs: 50,
        patience: 10,
        ..ClassifierConfig::default()
    };
    let mut group = c.benchmark_group("eval_downstream");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| eval_downstream(&model.model, &x, &ds.y, &plan, 3, &clf, 7, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, folds, classifier_seeds);
criterion_main!(benches);
