//! End-to-end training behaviour on small problems.

use envae::data::{stratified_split, Dataset, synthetic_hdlss, DEFAULT_FRACTIONS};
use envae::metrics::balanced_accuracy;
use envae::model::{EnVae, GroupMask, LatentReduction, ModelConfig};
use envae::numeric::{Adam, AdamState, Matrix, Mode, Rng};
use envae::training::{cross_validate, train_fold, TrainConfig};

#[test]
fn overfits_a_single_sample() {
    let cfg = ModelConfig {
        latent_dim: 2,
        n_groups: 2,
        hidden: Some(vec![16]),
        dropout: 0.0,
        batch_norm: false,
        ..ModelConfig::default()
    };
    let mut model = EnVae::new(6, &cfg, 1).unwrap();
    let x = Matrix::from_rows(&[[0.1, 0.9, 0.3, 0.7, 0.5, 0.2]]).unwrap();
    let adam = Adam { lr: 0.01, ..Adam::default() };
    let mut state = AdamState::new(model.param_lengths());
    let mut rng = Rng::new(2);
    let first = model.elbo_loss(&x, None, 0.0, &mut rng, Mode::Train).unwrap().0.recon;
    for _ in 0..1500 {
        let (_, g) = model.elbo_loss(&x, None, 0.0, &mut rng, Mode::Train).unwrap();
        let g = g.unwrap();
        state.step(&adam, &mut model.params_mut(), &g.slices()).unwrap();
    }
    let last = model.elbo_loss(&x, None, 0.0, &mut rng, Mode::Eval).unwrap().0.recon;
    assert!(last < 1e-3 && last < first / 100.0, "recon {first} -> {last}");
}

#[test]
fn supervised_head_separates_easy_classes() {
    let mut rng = Rng::new(3);
    let (n, d) = (80, 24);
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x: Vec<f64> = y
        .iter()
        .flat_map(|&c| (0..d).map(|j| if (j % 2 == 0) == (c == 0) { 1.0 } else { -1.0 }).collect::<Vec<_>>())
        .map(|v| v + 0.3 * rng.normal())
        .collect();
    let names = (0..d).map(|j| format!("f{j}")).collect();
    let ds = &Dataset::new(Matrix::from_vec(n, d, x).unwrap(), y, names, vec!["a".into(), "b".into()]).unwrap();
    let plan = stratified_split(&ds.y, 2, DEFAULT_FRACTIONS, 3).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model.n_groups = 2;
    cfg.model.latent_dim = 4;
    cfg.max_epochs = 150;
    cfg.patience = 150;
    cfg.beta_warmup_epochs = 20;
    cfg.supervised = true;
    cfg.seed = 3;
    let run = train_fold(ds, &plan, &cfg).unwrap();
    let x = run.scaler.transform(&ds.x.select_rows(&plan.test)).unwrap();
    let pred = run.model.predict(&x).unwrap();
    let acc = balanced_accuracy(&ds.labels_at(&plan.test), &pred, 2).unwrap();
    assert!(acc >= 0.8, "balanced accuracy {acc}");
}

#[test]
fn synthetic_task_is_balanced_and_shaped() {
    let data = synthetic_hdlss(100, 1000, 8, 4, 0.5, 1).unwrap();
    assert_eq!(data.dataset.x.shape(), (100, 1000));
    assert_eq!(data.latents.shape(), (100, 8));
    for c in data.dataset.class_counts() {
        assert!((15..=35).contains(&c), "class counts {:?}", data.dataset.class_counts());
    }
    let again = synthetic_hdlss(100, 1000, 8, 4, 0.5, 1).unwrap();
    assert_eq!(data.dataset.x, again.dataset.x);
}

#[test]
fn folds_partition_and_restore_best_weights() {
    let ds = synthetic_hdlss(50, 20, 3, 2, 0.5, 5).unwrap().dataset;
    let mut cfg = TrainConfig::default();
    cfg.model.n_groups = 2;
    cfg.max_epochs = 8;
    cfg.patience = 3;
    cfg.beta_warmup_epochs = 2;
    cfg.seed = 5;
    let folds = cross_validate(&ds, &cfg).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = vec![0; ds.n_samples()];
    for f in &folds {
        f.plan.validate(ds.n_samples()).unwrap();
        for &i in &f.plan.test {
            seen[i] += 1;
        }
        let best = f.history.best_epoch;
        assert!(f.history.records.iter().all(|r| r.valid_loss >= f.history.records[best].valid_loss));
        let x = f.scaler.transform(&ds.x).unwrap();
        let z = f.model.infer_latent(&x, GroupMask::full(2), LatentReduction::PoeFull).unwrap();
        assert_eq!(z.mean.shape(), (50, cfg.model.latent_dim));
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(cross_validate(&ds, &cfg).unwrap()[2].model, folds[2].model);
}
