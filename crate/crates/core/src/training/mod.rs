//! Training loops, the β warm-up schedule, cross-validation and the
//! downstream-classifier protocol.

mod cv;
mod downstream;
mod trainer;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::numeric::Adam;
use crate::parallel::Execution;
use crate::{Error, Result};

pub use cv::{cross_validate, fold_plans, scale_for_plan, train_fold, FoldRun};
pub use downstream::{
    eval_downstream, mask_eval, train_classifier, DownstreamRun, MaskRow,
};
pub use trainer::{batch_ranges, train, validation_loss};

/// Downstream classifier trained on frozen latent means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
    pub adam: Adam,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub n_seeds: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            dropout: 0.5,
            batch_norm: true,
            adam: Adam::default(),
            batch_size: 32,
            max_epochs: 10_000,
            patience: 100,
            n_seeds: 5,
        }
    }
}

/// Everything a training run needs besides the data. `model.beta` is β_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: Adam,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta_warmup_epochs: usize,
    pub clip: f64,
    pub seed: u64,
    pub supervised: bool,
    pub folds: usize,
    pub valid_fraction: f64,
    /// Fit the min-max scaler on all samples instead of the train split.
    pub scale_whole_dataset: bool,
    /// Stratified reduction of every fold's train set.
    pub train_size: Option<usize>,
    pub classifier: ClassifierConfig,
    /// Scheduling only; never changes results.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: Adam::default(),
            batch_size: 32,
            max_epochs: 10_000,
            patience: 100,
            beta_warmup_epochs: 100,
            clip: 2.5,
            seed: 0,
            supervised: false,
            folds: 5,
            valid_fraction: 0.08,
            scale_whole_dataset: false,
            train_size: None,
            classifier: ClassifierConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("latent_dim", self.model.latent_dim),
            ("m", self.model.n_groups),
            ("classifier.batch_size", self.classifier.batch_size),
            ("classifier.max_epochs", self.classifier.max_epochs),
            ("classifier.patience", self.classifier.patience),
            ("classifier.n_seeds", self.classifier.n_seeds),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid("patience exceeds max_epochs"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds must be at least 2"));
        }
        if !(self.clip > 0.0) || !(self.adam.lr >= 0.0) {
            return Err(Error::invalid("clip must be positive and lr non-negative"));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::invalid("valid_fraction must lie in (0, 1)"));
        }
        if !(self.model.beta >= 0.0) || !self.model.beta.is_finite() {
            return Err(Error::invalid("beta_max must be finite and >= 0"));
        }
        if let Some(mode) = self.model.elbo_mode {
            mode.validate(self.model.n_groups)?;
        }
        Ok(())
    }
}

/// `β_max · min(1, epoch / warmup)`; β_max from the start when warmup is 0.
pub fn beta_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let beta_max = cfg.model.beta;
    if cfg.beta_warmup_epochs == 0 {
        return beta_max;
    }
    beta_max * (epoch as f64 / cfg.beta_warmup_epochs as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Not part of any deterministic report.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainHistory {
    pub fn best_valid_loss(&self) -> f64 {
        self.records[self.best_epoch].valid_loss
    }

    pub fn epochs_run(&self) -> usize {
        self.records.len()
    }

    /// Columns `epoch,train_loss,valid_loss,beta`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "valid_loss", "beta"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.valid_loss.to_string(),
                r.beta.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
