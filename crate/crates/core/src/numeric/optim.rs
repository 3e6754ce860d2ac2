//! Adam and global-norm gradient clipping over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    /// Zeroed moments for tensors of the given lengths.
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = lengths
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// is non-finite or the shapes disagree.
    pub fn step(&mut self, hp: &Adam, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moment tensors",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape(format!(
                    "adam tensor {i}: param {} grad {} state {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!(
                    "adam: gradient tensor {i} entry {j} is {}",
                    g[j]
                )));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over all gradient tensors taken together.
pub fn global_norm(grads: &[&mut [f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new([2]);
        st.step(&Adam::default(), &mut [&mut p], &[&[0.0, 0.0]])
            .unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        for g in [0.3, -4.0, 1e-3] {
            let mut p = vec![0.0];
            let mut st = AdamState::new([1]);
            st.step(&Adam::default(), &mut [&mut p], &[&[g]]).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0] + 1e-3 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let hp = Adam::default();
        let mut p = vec![0.0];
        let mut st = AdamState::new([1]);
        let mut prev = 0.0;
        let mut deltas = vec![];
        for _ in 0..2 {
            st.step(&hp, &mut [&mut p], &[&[0.7]]).unwrap();
            deltas.push((p[0] - prev).abs());
            prev = p[0];
        }
        // hand recurrence: step 2 has m̂ = g and v̂ = g², so the same magnitude
        let step2 = 1e-3 * 0.7 / (0.7 + 1e-8);
        assert!((deltas[1] - step2).abs() < 1e-15);
        assert!(deltas[1] <= deltas[0] + 1e-18);
    }

    #[test]
    fn nonfinite_gradient_is_rejected_without_side_effects() {
        let mut p = vec![1.0];
        let mut st = AdamState::new([1]);
        assert!(st
            .step(&Adam::default(), &mut [&mut p], &[&[f64::NAN]])
            .is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clip_examples() {
        let mut a = vec![0.6, 0.8];
        clip_global_norm(&mut [&mut a], 2.5);
        assert_eq!(a, vec![0.6, 0.8]);

        let mut b = vec![3.0, 4.0];
        let n = clip_global_norm(&mut [&mut b], 2.5);
        assert_eq!(n, 5.0);
        assert!((b[0] - 1.5).abs() < 1e-15 && (b[1] - 2.0).abs() < 1e-15);

        let mut z = vec![0.0; 3];
        clip_global_norm(&mut [&mut z], 2.5);
        assert_eq!(z, vec![0.0; 3]);
    }

    proptest::proptest! {
        #[test]
        fn clipped_norm_never_exceeds_max(
            a in proptest::collection::vec(-1e3f64..1e3, 0..20),
            b in proptest::collection::vec(-1e3f64..1e3, 0..20),
            max in 1e-3f64..10.0,
        ) {
            let (mut a, mut b) = (a, b);
            let mut gs = [a.as_mut_slice(), b.as_mut_slice()];
            clip_global_norm(&mut gs, max);
            proptest::prop_assert!(global_norm(&gs) <= max + 1e-12);
        }

        #[test]
        fn second_moments_stay_nonnegative(gs in proptest::collection::vec(-50f64..50.0, 1..30)) {
            let mut p = vec![0.0];
            let mut st = AdamState::new([1]);
            for (i, g) in gs.iter().enumerate() {
                st.step(&Adam::default(), &mut [&mut p], &[&[*g]]).unwrap();
                proptest::prop_assert_eq!(st.step_count(), i as u64 + 1);
                proptest::prop_assert!(st.second_moments()[0][0] >= 0.0);
            }
        }
    }
}
