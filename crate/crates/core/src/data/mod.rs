//! Tabular datasets: CSV ingestion, min-max scaling, stratified splitting and
//! a synthetic high-dimensional generator.

mod csv_io;
mod scaler;
mod split;
mod synth;

pub use csv_io::{load_csv, write_csv, write_latents_csv};
pub use scaler::{fit_scaler, MinMaxScaler};
pub use split::{
    cv_plans, hamilton_allocate, stratified_folds, stratified_split, subsample_train, SplitPlan,
    DEFAULT_FRACTIONS,
};
pub use synth::{synthetic_hdlss, SyntheticData, SyntheticGenerator};

use crate::numeric::Matrix;
use crate::{Error, Result};

/// Feature matrix with dense class labels `0..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub scaler: Option<MinMaxScaler>,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Vec<usize>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if feature_names.len() != x.cols() {
            return Err(Error::shape("feature name count differs from columns"));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= class_names.len()) {
            return Err(Error::data(format!(
                "label {bad} outside 0..{}",
                class_names.len()
            )));
        }
        if let Some(i) = x.data().iter().position(|v| v.is_nan()) {
            return Err(Error::data(format!(
                "NaN at row {}, column {}",
                i / x.cols(),
                i % x.cols()
            )));
        }
        Ok(Self {
            x,
            y,
            feature_names,
            class_names,
            scaler: None,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Attaches a fitted scaler; [`Dataset::apply_scaler`] then uses it.
    pub fn with_scaler(mut self, scaler: MinMaxScaler) -> Self {
        self.scaler = Some(scaler);
        self
    }

    /// Scaled copy of the feature matrix. Fails if no scaler has been fit.
    pub fn apply_scaler(&self) -> Result<Matrix> {
        let scaler = self
            .scaler
            .as_ref()
            .ok_or_else(|| Error::invalid("scaler applied before fit"))?;
        scaler.transform(&self.x)
    }
}
