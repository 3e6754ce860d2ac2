use super::{train, TrainConfig, TrainHistory};
use crate::data::{cv_plans, subsample_train, Dataset, MinMaxScaler, SplitPlan};
use crate::model::{EnVae, HeadConfig};
use crate::numeric::{derive_seed, Matrix};
use crate::parallel::try_map_indexed;
use crate::{Error, Result};

/// One trained fold.
#[derive(Clone, Debug)]
pub struct FoldRun {
    pub plan: SplitPlan,
    pub scaler: MinMaxScaler,
    pub model: EnVae,
    pub history: TrainHistory,
}

/// Stratified cross-validation plans, optionally with reduced train sets.
pub fn fold_plans(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<SplitPlan>> {
    let plans = cv_plans(&ds.y, ds.n_classes(), cfg.folds, cfg.valid_fraction, cfg.seed)?;
    match cfg.train_size {
        None => Ok(plans),
        Some(n) => plans
            .iter()
            .map(|p| subsample_train(p, &ds.y, ds.n_classes(), n, derive_seed(cfg.seed, &[0x5B, p.fold as u64])))
            .collect(),
    }
}

/// Scaler fit on the plan's train rows (or on every row) and the whole
/// feature matrix transformed by it.
pub fn scale_for_plan(ds: &Dataset, plan: &SplitPlan, cfg: &TrainConfig) -> Result<(MinMaxScaler, Matrix)> {
    let rows: Vec<usize> = if cfg.scale_whole_dataset {
        (0..ds.n_samples()).collect()
    } else {
        plan.train.clone()
    };
    let scaler = MinMaxScaler::fit(&ds.x, &rows)?;
    let x = scaler.transform(&ds.x)?;
    Ok((scaler, x))
}

/// Builds and trains the model of one fold.
pub fn train_fold(ds: &Dataset, plan: &SplitPlan, cfg: &TrainConfig) -> Result<FoldRun> {
    plan.validate(ds.n_samples())?;
    let (scaler, x) = scale_for_plan(ds, plan, cfg)?;
    let mut model_cfg = cfg.model.clone();
    if cfg.supervised && model_cfg.head.is_none() {
        model_cfg.head = Some(HeadConfig::new(ds.n_classes()));
    }
    if !cfg.supervised {
        model_cfg.head = None;
    }
    let model = EnVae::new(ds.n_features(), &model_cfg, derive_seed(cfg.seed, &[0xF0, plan.fold as u64]))?;
    let y_train = ds.labels_at(&plan.train);
    let y_valid = ds.labels_at(&plan.valid);
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = derive_seed(cfg.seed, &[0xF1, plan.fold as u64]);
    let (model, history) = train(
        model,
        &x.select_rows(&plan.train),
        Some(&y_train),
        &x.select_rows(&plan.valid),
        Some(&y_valid),
        &fold_cfg,
    )
    .map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("fold {}: {m}", plan.fold)),
        other => other,
    })?;
    Ok(FoldRun {
        plan: plan.clone(),
        scaler,
        model,
        history,
    })
}

/// Stratified k-fold cross-validation; folds run on the configured executor.
pub fn cross_validate(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<FoldRun>> {
    cfg.validate()?;
    let plans = fold_plans(ds, cfg)?;
    try_map_indexed(plans.len(), cfg.execution, |f| train_fold(ds, &plans[f], cfg))
}
