//! Balanced accuracy and the fitted-Gaussian total correlation estimator.

use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::{Error, Result};

pub const DEFAULT_TC_JITTER: f64 = 1e-6;

/// Mean of per-class recall over classes `0..n_classes`.
///
/// Every class must occur in `y_true`; predictions outside the class range
/// simply count as misses.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::invalid("balanced accuracy over zero classes"));
    }
    let mut total = vec![0usize; n_classes];
    let mut hit = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes {
            return Err(Error::invalid(format!(
                "label {t} outside 0..{n_classes}"
            )));
        }
        total[t] += 1;
        if t == p {
            hit[t] += 1;
        }
    }
    if let Some(c) = total.iter().position(|&n| n == 0) {
        return Err(Error::data(format!("class {c} has no true samples")));
    }
    Ok(hit
        .iter()
        .zip(&total)
        .map(|(&h, &n)| h as f64 / n as f64)
        .sum::<f64>()
        / n_classes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    Mean,
    Sample,
}

/// `N × L` latent codes, either posterior means or posterior samples.
#[derive(Clone, Debug)]
pub struct LatentTable {
    values: Matrix,
    source: LatentSource,
}

impl LatentTable {
    /// Requires `N ≥ L + 1` so the sample covariance can be full rank.
    pub fn new(values: Matrix, source: LatentSource) -> Result<Self> {
        if values.cols() == 0 || values.rows() < values.cols() + 1 {
            return Err(Error::invalid(format!(
                "total correlation needs N ≥ L + 1, got N = {} and L = {}",
                values.rows(),
                values.cols()
            )));
        }
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn source(&self) -> LatentSource {
        self.source
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcEstimate {
    pub tc: f64,
    pub jitter: f64,
}

/// Unbiased sample covariance (divisor `N − 1`).
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mean: Vec<f64> = x.sum_rows().iter().map(|s| s / n as f64).collect();
    let mut centered = x.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered
        .t_matmul(&centered)
        .expect("matching row counts");
    let denom = (n as f64 - 1.0).max(1.0);
    for v in cov.data_mut() {
        *v /= denom;
    }
    debug_assert_eq!(cov.shape(), (d, d));
    cov
}

/// Log-determinant of `(Σ + Σᵀ)/2 + jitter·I` by Cholesky factorization,
/// plus the log of each jittered diagonal entry.
pub fn covariance_logdet(sigma: &Matrix, jitter: f64) -> Result<(f64, Vec<f64>)> {
    let n = sigma.rows();
    if sigma.cols() != n {
        return Err(Error::shape("covariance must be square"));
    }
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (sigma.get(i, j) + sigma.get(j, i)));
        }
        a.set(i, i, a.get(i, i) + jitter);
    }
    let log_diag: Vec<f64> = (0..n).map(|i| a.get(i, i).ln()).collect();
    let mut l = Matrix::zeros(n, n);
    let mut logdet = 0.0;
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Factorization(format!(
                "covariance not positive definite after jitter {jitter}: pivot {j} is {d:.3e}"
            )));
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        logdet += 2.0 * ljj.ln();
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok((logdet, log_diag))
}

/// Total correlation of `N(μ, Σ)`: `½ (Σⱼ ln Σⱼⱼ − ln det Σ)`.
pub fn tc_from_covariance(sigma: &Matrix, jitter: f64) -> Result<f64> {
    let (logdet, log_diag) = covariance_logdet(sigma, jitter)?;
    Ok(0.5 * (log_diag.iter().sum::<f64>() - logdet))
}

/// Fits a Gaussian to the latent table and returns its total correlation.
pub fn estimate_tc(latents: &LatentTable, jitter: f64) -> Result<TcEstimate> {
    let cov = sample_covariance(latents.values());
    let tc = tc_from_covariance(&cov, jitter)?;
    Ok(TcEstimate { tc, jitter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1, 1], &[0; 5], 2).unwrap(), 0.5);
        // recalls 4/5 and 3/5
        let t = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let p = [0, 0, 0, 0, 1, 1, 1, 1, 0, 0];
        assert!((balanced_accuracy(&t, &p, 2).unwrap() - 0.7).abs() < 1e-15);
        assert!(balanced_accuracy(&[0, 0], &[0, 0], 2).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1], 2).is_err());
    }

    /// Determinant by cofactor expansion along the first row.
    fn cofactor_det(a: &[Vec<f64>]) -> f64 {
        let n = a.len();
        if n == 1 {
            return a[0][0];
        }
        (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> = a[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(k, _)| *k != j)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[0][j] * cofactor_det(&minor)
            })
            .sum()
    }

    #[test]
    fn logdet_examples() {
        let (ld, _) = covariance_logdet(&Matrix::identity(4), 0.0).unwrap();
        assert!(ld.abs() < 1e-15);
        let d = Matrix::from_rows(&[[1.0, 0.0], [0.0, 4.0]]).unwrap();
        let (ld, _) = covariance_logdet(&d, 0.0).unwrap();
        assert!((ld - 4f64.ln()).abs() < 1e-15);

        let mut rng = Rng::new(21);
        for _ in 0..5 {
            let a = Matrix::from_vec(5, 5, rng.normals(25)).unwrap();
            let mut spd = a.t_matmul(&a).unwrap();
            for i in 0..5 {
                spd.set(i, i, spd.get(i, i) + 1.0);
            }
            let rows: Vec<Vec<f64>> = spd.iter_rows().map(<[f64]>::to_vec).collect();
            let oracle = cofactor_det(&rows).ln();
            let (ld, _) = covariance_logdet(&spd, 0.0).unwrap();
            assert!((ld - oracle).abs() < 1e-8, "{ld} vs {oracle}");
        }
    }

    #[test]
    fn tc_of_diagonal_covariance_is_zero() {
        let d = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 0.3, 0.0], [0.0, 0.0, 7.0]]).unwrap();
        assert!(tc_from_covariance(&d, DEFAULT_TC_JITTER).unwrap().abs() < 1e-10);
    }

    #[test]
    fn indefinite_covariance_fails_to_factor() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let err = covariance_logdet(&m, 1e-6).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn duplicated_column_gives_large_tc() {
        let mut rng = Rng::new(2);
        let n = 500;
        let mut x = Matrix::zeros(n, 3);
        for r in 0..n {
            let a = rng.normal();
            x.set(r, 0, a);
            x.set(r, 1, a);
            x.set(r, 2, rng.normal());
        }
        let table = LatentTable::new(x, LatentSource::Mean).unwrap();
        match estimate_tc(&table, DEFAULT_TC_JITTER) {
            Ok(e) => assert!(e.tc > 5.0, "tc {}", e.tc),
            Err(e) => assert!(e.is_numeric()),
        }
    }

    #[test]
    fn latent_table_needs_enough_rows() {
        assert!(LatentTable::new(Matrix::zeros(3, 3), LatentSource::Mean).is_err());
        assert!(LatentTable::new(Matrix::zeros(4, 3), LatentSource::Sample).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn tc_invariant_to_affine_rescaling(
            seed in 0u64..1000,
            scales in proptest::collection::vec(0.1f64..10.0, 3),
            signs in proptest::collection::vec(proptest::bool::ANY, 3),
            shifts in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let mut rng = Rng::new(seed);
            let n = 200;
            let mut x = Matrix::zeros(n, 3);
            for r in 0..n {
                let a = rng.normal();
                let b = rng.normal();
                x.set(r, 0, a);
                x.set(r, 1, 0.6 * a + b);
                x.set(r, 2, rng.normal() - 0.3 * b);
            }
            let mut y = x.clone();
            for r in 0..n {
                for j in 0..3 {
                    let s = if signs[j] { scales[j] } else { -scales[j] };
                    y.set(r, j, s * x.get(r, j) + shifts[j]);
                }
            }
            // jitter off so rescaling cannot interact with the ridge
            let tx = tc_from_covariance(&sample_covariance(&x), 0.0).unwrap();
            let ty = tc_from_covariance(&sample_covariance(&y), 0.0).unwrap();
            proptest::prop_assert!((tx - ty).abs() < 1e-8);
            proptest::prop_assert!(tx >= -1e-10);
        }

        #[test]
        fn balanced_accuracy_invariant_to_relabeling(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 6..40),
        ) {
            let mut t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            t.extend([0, 1, 2]);
            let mut p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            p.extend([1, 2, 0]);
            let perm = [2, 0, 1];
            let tp: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let a = balanced_accuracy(&t, &p, 3).unwrap();
            let b = balanced_accuracy(&tp, &pp, 3).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-12);
            proptest::prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
