use std::ops::Range;
use std::time::Instant;

use super::{beta_at_epoch, EpochRecord, TrainConfig, TrainHistory};
use crate::model::EnVae;
use crate::numeric::{clip_global_norm, AdamState, Matrix, Mode, Rng};
use crate::{Error, Result};

const TRAIN_STREAM: u64 = 0x7EA1;
const VALID_STREAM: u64 = 0x7A1D;

/// Consecutive chunks of `batch_size`; a trailing chunk of one row is merged
/// into the previous chunk so train-mode batch-norm always sees two rows.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Eval-mode loss at β_max with a noise stream that is identical every call.
pub fn validation_loss(model: &mut EnVae, x: &Matrix, y: Option<&[usize]>, cfg: &TrainConfig) -> Result<f64> {
    let labels = if model.head().is_some() { y } else { None };
    let mut rng = Rng::substream(cfg.seed, &[VALID_STREAM]);
    Ok(model
        .elbo_loss(x, labels, cfg.model.beta, &mut rng, Mode::Eval)?
        .0
        .loss)
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
        Error::Factorization(m) => Error::Factorization(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Mini-batch training with early stopping on the validation loss. Returns
/// the weights of the best validation epoch. Labels are used only when the
/// model carries a classifier head.
pub fn train(
    mut model: EnVae,
    x_train: &Matrix,
    y_train: Option<&[usize]>,
    x_valid: &Matrix,
    y_valid: Option<&[usize]>,
    cfg: &TrainConfig,
) -> Result<(EnVae, TrainHistory)> {
    cfg.validate()?;
    let supervised = model.head().is_some();
    if supervised && (y_train.is_none() || y_valid.is_none()) {
        return Err(Error::invalid("supervised training needs train and valid labels"));
    }
    if x_train.rows() == 0 || x_valid.rows() == 0 {
        return Err(Error::invalid("train and valid splits must be non-empty"));
    }
    let start = Instant::now();
    let mut rng = Rng::substream(cfg.seed, &[TRAIN_STREAM]);
    let mut adam = AdamState::new(model.param_lengths());
    let n = x_train.rows();
    let ranges = batch_ranges(n, cfg.batch_size);

    let mut records = Vec::new();
    let mut best: Option<(f64, EnVae)> = None;
    let mut best_epoch = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let beta = beta_at_epoch(cfg, epoch);
        let order = rng.permutation(n);
        let mut total = 0.0;
        for (k, r) in ranges.iter().enumerate() {
            let idx = &order[r.clone()];
            let xb = x_train.select_rows(idx);
            let yb: Option<Vec<usize>> = y_train
                .filter(|_| supervised)
                .map(|y| idx.iter().map(|&i| y[i]).collect());
            let (terms, grads) = model
                .elbo_loss(&xb, yb.as_deref(), beta, &mut rng, Mode::Train)
                .map_err(|e| with_context(e, &format!("epoch {epoch}, batch {k}")))?;
            let mut grads = grads.expect("train mode returns gradients");
            clip_global_norm(&mut grads.slices_mut(), cfg.clip);
            adam.step(&cfg.adam, &mut model.params_mut(), &grads.slices())
                .map_err(|e| with_context(e, &format!("epoch {epoch}, batch {k}")))?;
            total += terms.loss * idx.len() as f64;
        }
        let valid_loss = validation_loss(&mut model, x_valid, y_valid, cfg)
            .map_err(|e| with_context(e, &format!("epoch {epoch}, validation")))?;
        records.push(EpochRecord {
            epoch,
            train_loss: total / n as f64,
            valid_loss,
            beta,
        });
        match &best {
            Some((b, _)) if valid_loss >= *b => {
                if epoch - best_epoch >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((valid_loss, model.clone()));
                best_epoch = epoch;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((
        best_model,
        TrainHistory {
            records,
            best_epoch,
            stopped_early,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn batch_ranges_merge_singletons() {
        assert_eq!(batch_ranges(65, 32), vec![0..32, 32..65]);
        assert_eq!(batch_ranges(64, 32), vec![0..32, 32..64]);
        assert_eq!(batch_ranges(10, 32), vec![0..10]);
        assert_eq!(batch_ranges(34, 32), vec![0..32, 32..34]);
    }

    fn setup() -> (EnVae, Matrix, Matrix, TrainConfig) {
        let mut rng = Rng::new(4);
        let x = Matrix::from_vec(40, 12, (0..480).map(|_| rng.uniform()).collect()).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            n_groups: 2,
            latent_dim: 3,
            hidden: Some(vec![8, 8]),
            batch_norm: false,
            ..ModelConfig::default()
        };
        cfg.max_epochs = 30;
        cfg.patience = 30;
        cfg.batch_size = 8;
        cfg.seed = 3;
        let model = EnVae::new(12, &cfg.model, 1).unwrap();
        (model, x.row_block(0, 32), x.row_block(32, 40), cfg)
    }

    #[test]
    fn frozen_learning_rate_stalls() {
        let (model, xt, xv, mut cfg) = setup();
        cfg.adam.lr = 0.0;
        cfg.patience = 1;
        let (_, h) = train(model, &xt, None, &xv, None, &cfg).unwrap();
        assert_eq!(h.epochs_run(), 2);
        assert!(h.stopped_early);
    }

    #[test]
    fn replay_and_best_weights() {
        let (model, xt, xv, cfg) = setup();
        let (mut a, ha) = train(model.clone(), &xt, None, &xv, None, &cfg).unwrap();
        let (_, hb) = train(model, &xt, None, &xv, None, &cfg).unwrap();
        assert_eq!((&ha.records, ha.best_epoch), (&hb.records, hb.best_epoch));
        let min = ha.records.iter().map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(ha.best_valid_loss(), min);
        assert_eq!(validation_loss(&mut a, &xv, None, &cfg).unwrap(), min);
        assert!(ha.records.last().unwrap().train_loss < ha.records[0].train_loss);
    }
}
