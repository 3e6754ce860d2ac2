//! Diagonal Gaussian algebra: product-of-experts fusion, KL to the standard
//! normal, reparameterized sampling and uniform mixtures.

use serde::{Deserialize, Serialize};

use crate::numeric::{Matrix, Rng};
use crate::{Error, Result};

/// Bounds applied to every log-variance at construction.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// `N(mean, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, mut log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::shape(format!(
                "mean has {} entries, log-variance {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("gaussian parameters"));
        }
        for v in &mut log_var {
            *v = clamp_log_var(*v);
        }
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// `KL(self ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
    pub fn kl_std_normal(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>()
    }

    /// `z = μ + σ ⊙ ε` for a given `ε`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    /// Draws `ε ~ N(0, I)` and returns `(z, ε)`.
    pub fn reparam_sample(&self, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let eps = rng.normals(self.dim());
        (self.sample_with(&eps), eps)
    }
}

/// Precision-weighted fusion of diagonal Gaussian experts.
///
/// With `Tᵢ = exp(−log_varᵢ)` the result has precision `T = Σ Tᵢ` (plus one
/// per dimension for the standard-normal prior expert when `include_prior`)
/// and mean `Σ Tᵢ μᵢ / T`.
pub fn poe_combine(dim: usize, experts: &[&DiagGaussian], include_prior: bool) -> Result<DiagGaussian> {
    if experts.is_empty() && !include_prior {
        return Err(Error::invalid(
            "product of experts over no experts needs the prior",
        ));
    }
    if let ([only], false) = (experts, include_prior) {
        if only.dim() == dim {
            return Ok((*only).clone());
        }
    }
    let mut precision = vec![if include_prior { 1.0 } else { 0.0 }; dim];
    let mut weighted = vec![0.0; dim];
    for e in experts {
        if e.dim() != dim {
            return Err(Error::shape(format!(
                "expert of dimension {} fused into dimension {dim}",
                e.dim()
            )));
        }
        for l in 0..dim {
            let t = (-e.log_var[l]).exp();
            precision[l] += t;
            weighted[l] += t * e.mean[l];
        }
    }
    let mean = weighted.iter().zip(&precision).map(|(w, t)| w / t).collect();
    let log_var = precision.iter().map(|t| -t.ln()).collect();
    DiagGaussian::new(mean, log_var)
}

/// Equal-weight mixture of diagonal Gaussians with a shared dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformMixture {
    components: Vec<DiagGaussian>,
}

impl UniformMixture {
    pub fn new(components: Vec<DiagGaussian>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        let dim = first.dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::shape("mixture components differ in dimension"));
        }
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    /// Picks a component uniformly and samples from it.
    pub fn sample(&self, rng: &mut Rng) -> (usize, Vec<f64>) {
        let k = rng.below(self.components.len());
        (k, self.components[k].reparam_sample(rng).0)
    }

    /// Moment-matched diagonal Gaussian: mixture mean and per-dimension variance.
    pub fn moment_match(&self) -> DiagGaussian {
        let k = self.components.len() as f64;
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for c in &self.components {
            for l in 0..dim {
                mean[l] += c.mean[l] / k;
                second[l] += (c.log_var[l].exp() + c.mean[l] * c.mean[l]) / k;
            }
        }
        let log_var = second
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s - m * m).max(f64::MIN_POSITIVE).ln())
            .collect();
        DiagGaussian::new(mean, log_var).expect("finite moments of finite components")
    }

    /// `(1/K) Σ_k KL(q_k ‖ N(0, I))`, an upper bound on the mixture's KL.
    pub fn mean_component_kl(&self) -> f64 {
        self.components.iter().map(DiagGaussian::kl_std_normal).sum::<f64>()
            / self.components.len() as f64
    }
}

pub fn mixture_sample(mix: &UniformMixture, rng: &mut Rng) -> (usize, Vec<f64>) {
    mix.sample(rng)
}

/// A batch of diagonal Gaussians, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBatch {
    pub mean: Matrix,
    pub log_var: Matrix,
}

impl GaussianBatch {
    /// Splits a `B × 2L` encoder output into mean and clamped log-variance.
    pub fn from_encoder_output(out: &Matrix, latent_dim: usize) -> Result<Self> {
        if out.cols() != 2 * latent_dim {
            return Err(Error::shape(format!(
                "encoder output has {} columns, expected {}",
                out.cols(),
                2 * latent_dim
            )));
        }
        let (mean, mut log_var) = out.split_columns(latent_dim);
        for v in log_var.data_mut() {
            *v = clamp_log_var(*v);
        }
        Ok(Self { mean, log_var })
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn row(&self, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: self.mean.row(r).to_vec(),
            log_var: self.log_var.row(r).to_vec(),
        }
    }

    pub fn from_rows(rows: &[DiagGaussian]) -> Result<Self> {
        let means: Vec<&[f64]> = rows.iter().map(|g| g.mean()).collect();
        let lvs: Vec<&[f64]> = rows.iter().map(|g| g.log_var()).collect();
        Ok(Self {
            mean: Matrix::from_rows(&means)?,
            log_var: Matrix::from_rows(&lvs)?,
        })
    }
}
