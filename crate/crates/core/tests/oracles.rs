//! Closed forms checked against brute-force references.

use envae::distributions::{poe_combine, DiagGaussian};
use envae::metrics::{estimate_tc, LatentSource, LatentTable, DEFAULT_TC_JITTER};
use envae::model::{EnVae, ModelConfig};
use envae::numeric::{Matrix, Mlp, Mode, Rng};
use proptest::prelude::*;

#[test]
fn poe_matches_grid_product() {
    let mut rng = Rng::new(1);
    let n = 8001;
    let step = 24.0 / (n - 1) as f64;
    for _ in 0..10 {
        let experts: Vec<DiagGaussian> = (0..3)
            .map(|_| DiagGaussian::new(vec![rng.uniform_range(-2.0, 2.0)], vec![rng.uniform_range(-1.5, 1.0)]).unwrap())
            .collect();
        let refs: Vec<&DiagGaussian> = experts.iter().collect();
        let fused = poe_combine(1, &refs, true).unwrap();
        let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let z = -12.0 + i as f64 * step;
            let log_p: f64 = -0.5 * z * z
                + experts
                    .iter()
                    .map(|e| -0.5 * (z - e.mean()[0]).powi(2) / e.variance()[0])
                    .sum::<f64>();
            let p = log_p.exp();
            mass += p;
            m1 += p * z;
            m2 += p * z * z;
        }
        let mean = m1 / mass;
        assert!((mean - fused.mean()[0]).abs() < 1e-9);
        assert!((m2 / mass - mean * mean - fused.variance()[0]).abs() < 1e-9);
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = Rng::new(2);
    let q = DiagGaussian::new(vec![0.7, -0.2], vec![-0.5, 0.4]).unwrap();
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let (z, eps) = q.reparam_sample(&mut rng);
        sum += (0..2)
            .map(|k| -0.5 * q.log_var()[k] - 0.5 * eps[k] * eps[k] + 0.5 * z[k] * z[k])
            .sum::<f64>();
    }
    assert!((sum / n as f64 - q.kl_std_normal()).abs() < 0.01);
}

#[test]
fn tc_of_correlated_pair() {
    let mut rng = Rng::new(3);
    let n = 20_000;
    let rho: f64 = 0.8;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (a, b) = (rng.normal(), rng.normal());
        data.extend([a, rho * a + (1.0 - rho * rho).sqrt() * b]);
    }
    let t = LatentTable::new(Matrix::from_vec(n, 2, data).unwrap(), LatentSource::Sample).unwrap();
    let tc = estimate_tc(&t, DEFAULT_TC_JITTER).unwrap().tc;
    assert!((tc + 0.5 * (1.0 - rho * rho).ln()).abs() < 0.02, "tc {tc}");
}

/// A single-group model without the prior expert is an ordinary VAE.
#[test]
fn single_group_is_a_plain_vae() {
    let cfg = ModelConfig {
        latent_dim: 2,
        n_groups: 1,
        hidden: Some(vec![5]),
        dropout: 0.0,
        batch_norm: false,
        include_prior: false,
        ..ModelConfig::default()
    };
    let mut model = EnVae::new(7, &cfg, 4).unwrap();
    let enc: Mlp = model.encoders()[0].clone();
    let dec: Mlp = model.decoders()[0].clone();
    let mut rng = Rng::new(5);
    let x = Matrix::from_vec(4, 7, (0..28).map(|_| rng.uniform()).collect()).unwrap();
    let loss = model.elbo_loss(&x, None, 2.0, &mut Rng::new(6), Mode::Eval).unwrap().0;

    let out = enc.forward_eval(&x).unwrap();
    let mut eps_rng = Rng::new(6);
    let eps = eps_rng.normals(8);
    let mut z = Matrix::zeros(4, 2);
    let mut kl = 0.0;
    for r in 0..4 {
        for j in 0..2 {
            let (mu, lv) = (out.get(r, j), out.get(r, 2 + j));
            z.set(r, j, mu + (0.5 * lv).exp() * eps[r * 2 + j]);
            kl += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
        }
    }
    let xhat = dec.forward_eval(&z).unwrap();
    let recon: f64 = xhat.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
    assert!((loss.recon - recon).abs() < 1e-12);
    assert!((loss.kl - kl / 4.0).abs() < 1e-12);
    assert!((loss.loss - recon - 2.0 * kl / 4.0).abs() < 1e-12);
}

fn gaussian(dim: usize) -> impl Strategy<Value = DiagGaussian> {
    (
        proptest::collection::vec(-3.0..3.0f64, dim),
        proptest::collection::vec(-4.0..4.0f64, dim),
    )
        .prop_map(|(m, v)| DiagGaussian::new(m, v).unwrap())
}

proptest! {
    #[test]
    fn poe_sharpens_and_ignores_order(experts in proptest::collection::vec(gaussian(3), 1..5), prior: bool) {
        let refs: Vec<&DiagGaussian> = experts.iter().collect();
        let fused = poe_combine(3, &refs, prior).unwrap();
        let mut rev = refs.clone();
        rev.reverse();
        let back = poe_combine(3, &rev, prior).unwrap();
        for k in 0..3 {
            let min_var = experts.iter().map(|e| e.variance()[k]).fold(f64::INFINITY, f64::min);
            prop_assert!(fused.variance()[k] <= min_var * (1.0 + 1e-12));
            prop_assert!((fused.mean()[k] - back.mean()[k]).abs() < 1e-12);
            let lo = experts.iter().map(|e| e.mean()[k]).fold(f64::INFINITY, f64::min).min(if prior { 0.0 } else { f64::INFINITY });
            let hi = experts.iter().map(|e| e.mean()[k]).fold(f64::NEG_INFINITY, f64::max).max(if prior { 0.0 } else { f64::NEG_INFINITY });
            prop_assert!(fused.mean()[k] >= lo - 1e-12 && fused.mean()[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(q in gaussian(4)) {
        prop_assert!(q.kl_std_normal() >= -1e-12);
    }
}
