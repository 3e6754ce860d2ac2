use super::Matrix;
use crate::{Error, Result};

/// Mean softmax cross-entropy over rows and its gradient wrt the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for r in 0..b {
        let row = logits.row(r);
        let y = labels[r];
        if y >= c {
            return Err(Error::invalid(format!("label {y} outside 0..{c}")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(r);
        for k in 0..c {
            g[k] = (row[k] - log_z).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest entry in each row (first one on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
