//! Ensemble variational autoencoders for high-dimensional, low-sample-size
//! tabular data.
//!
//! The `D` input features are split into `m` disjoint random groups. Each group
//! owns a small encoder that emits a diagonal Gaussian "expert"; experts are
//! fused by a product of experts for every non-empty subset of groups, and the
//! joint posterior is the uniform mixture of those subset posteriors. Every
//! decoder reconstructs its own group from a shared latent sample, so the whole
//! feature vector is reconstructed from every subset of groups.
//!
//! Module map:
//!
//! - [`numeric`]: matrices, MLPs with batch-norm and dropout, Adam, clipping, seeded RNG
//! - [`distributions`]: diagonal Gaussian algebra (fusion, KL, sampling, mixtures)
//! - [`model`]: feature grouping, the ensemble model, its ELBO and missing-group inference
//! - [`training`]: training loop, beta warm-up, cross-validation, downstream classifier
//! - [`metrics`]: balanced accuracy and fitted-Gaussian total correlation
//! - [`data`]: CSV ingestion, min-max scaling, stratified splits, synthetic data
//! - [`report`]: line-delimited JSON and CSV run reports
//! - [`parallel`]: rayon-backed fan-out with a sequential fallback

pub mod data;
pub mod distributions;
mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod parallel;
pub mod report;
pub mod training;

pub use error::{Error, Result};
