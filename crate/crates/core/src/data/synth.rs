use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::numeric::{Matrix, Rng};
use crate::{Error, Result};

/// Linear-Gaussian generator of labelled high-dimensional data.
///
/// `z ~ N(0, I)`, `class = argmaxₖ ⟨uₖ, z⟩`, `x = W z + b + ε` with
/// `ε ~ N(0, noise_sd²)`. Rows of `W` have unit norm; the class directions
/// `uₖ` are orthonormal whenever `C ≤ L_true`, so classes are balanced in
/// expectation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenerator {
    /// `D × L_true`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// `C × L_true`
    pub class_directions: Matrix,
}

impl SyntheticGenerator {
    pub fn random(n_features: usize, latent_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > n_features {
            return Err(Error::invalid(format!(
                "latent dimension {latent_dim} must be in 1..={n_features}"
            )));
        }
        if n_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        let mut rng = Rng::substream(seed, &[0x5E17]);
        let mut weights = Matrix::from_vec(n_features, latent_dim, rng.normals(n_features * latent_dim))?;
        for r in 0..n_features {
            normalize(weights.row_mut(r));
        }
        let bias = rng.normals(n_features);
        let mut dirs = Matrix::from_vec(n_classes, latent_dim, rng.normals(n_classes * latent_dim))?;
        for k in 0..n_classes {
            if k < latent_dim {
                for prev in 0..k {
                    let p = dirs.row(prev).to_vec();
                    let row = dirs.row_mut(k);
                    let dot: f64 = row.iter().zip(&p).map(|(a, b)| a * b).sum();
                    for (v, q) in row.iter_mut().zip(&p) {
                        *v -= dot * q;
                    }
                }
            }
            normalize(dirs.row_mut(k));
        }
        Ok(Self {
            weights,
            bias,
            class_directions: dirs,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn label_of(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..self.class_directions.rows() {
            let s: f64 = self.class_directions.row(k).iter().zip(z).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (k, s);
            }
        }
        best.0
    }

    /// Draws `n` samples; returns the dataset and the generating latents.
    pub fn generate(&self, n: usize, noise_sd: f64, rng: &mut Rng) -> Result<(Dataset, Matrix)> {
        let l = self.latent_dim();
        let d = self.weights.rows();
        let z = Matrix::from_vec(n, l, rng.normals(n * l))?;
        let mut x = z.matmul_t(&self.weights)?;
        for r in 0..n {
            for (v, b) in x.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b + noise_sd * rng.normal();
            }
        }
        let y = (0..n).map(|r| self.label_of(z.row(r))).collect();
        let ds = Dataset::new(
            x,
            y,
            (0..d).map(|j| format!("f{j}")).collect(),
            (0..self.class_directions.rows()).map(|k| k.to_string()).collect(),
        )?;
        Ok((ds, z))
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        for a in v {
            *a /= n;
        }
    }
}

/// Output of [`synthetic_hdlss`], including everything needed for oracle checks.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub latents: Matrix,
    pub generator: SyntheticGenerator,
    pub noise_sd: f64,
    pub seed: u64,
}

pub fn synthetic_hdlss(
    n: usize,
    n_features: usize,
    latent_dim: usize,
    n_classes: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<SyntheticData> {
    let generator = SyntheticGenerator::random(n_features, latent_dim, n_classes, seed)?;
    let mut rng = Rng::substream(seed, &[0xDA7A]);
    let (dataset, latents) = generator.generate(n, noise_sd, &mut rng)?;
    Ok(SyntheticData {
        dataset,
        latents,
        generator,
        noise_sd,
        seed,
    })
}
