use serde::{Deserialize, Serialize};

use super::{batch_ranges, ClassifierConfig};
use crate::data::SplitPlan;
use crate::metrics::balanced_accuracy;
use crate::model::{fuse_batches, EnVae, GroupMask, LatentReduction};
use crate::numeric::{argmax_rows, clip_global_norm, softmax_cross_entropy, AdamState, Matrix, Mlp, MlpSpec, Rng};
use crate::parallel::{try_map_indexed, Execution};
use crate::{Error, Result};

const CLIP: f64 = 2.5;

/// MLP classifier on latent codes, early-stopped on validation cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    z_train: &Matrix,
    y_train: &[usize],
    z_valid: &Matrix,
    y_valid: &[usize],
    n_classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Mlp> {
    let mut present = vec![false; n_classes];
    for &c in y_train {
        present[c] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::data("classifier train split contains a single class"));
    }
    if z_valid.rows() == 0 {
        return Err(Error::data("classifier needs a non-empty validation split"));
    }
    let spec = MlpSpec::new(z_train.cols(), &cfg.hidden, n_classes)
        .with_batch_norm(cfg.batch_norm)
        .with_dropout(cfg.dropout);
    let mut net = Mlp::new(&spec, &mut Rng::substream(seed, &[0x1A17]))?;
    let mut rng = Rng::substream(seed, &[0x7EA1]);
    let mut adam = AdamState::new(net.param_lengths());
    let n = z_train.rows();
    let ranges = batch_ranges(n, cfg.batch_size);
    let mut best = (f64::INFINITY, net.clone());
    let mut best_epoch = 0;
    for epoch in 0..cfg.max_epochs {
        let order = rng.permutation(n);
        for r in &ranges {
            let idx = &order[r.clone()];
            let yb: Vec<usize> = idx.iter().map(|&i| y_train[i]).collect();
            let (logits, cache) = net.forward_train(&z_train.select_rows(idx), &mut rng)?;
            let (_, g) = softmax_cross_entropy(&logits, &yb)?;
            let (mut grads, _) = net.backward(&cache, &g)?;
            clip_global_norm(&mut grads.slices_mut(), CLIP);
            adam.step(&cfg.adam, &mut net.params_mut(), &grads.slices())?;
        }
        let (valid_ce, _) = softmax_cross_entropy(&net.forward_eval(z_valid)?, y_valid)?;
        if valid_ce < best.0 {
            best = (valid_ce, net.clone());
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug)]
pub struct DownstreamRun {
    pub seed_index: usize,
    pub balanced_accuracy: f64,
    pub classifier: Mlp,
}

/// Trains `cfg.n_seeds` classifiers on the latent means of the plan's train
/// rows and scores each on the test rows. `x` holds every sample, already scaled.
pub fn eval_downstream(
    model: &EnVae,
    x: &Matrix,
    y: &[usize],
    plan: &SplitPlan,
    n_classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<DownstreamRun>> {
    let z = model.latent_means(x)?;
    let pick = |idx: &[usize]| (z.select_rows(idx), idx.iter().map(|&i| y[i]).collect::<Vec<_>>());
    let (z_tr, y_tr) = pick(&plan.train);
    let (z_va, y_va) = pick(&plan.valid);
    let (z_te, y_te) = pick(&plan.test);
    try_map_indexed(cfg.n_seeds, exec, |s| {
        let clf_seed = crate::numeric::derive_seed(seed, &[0xC1A5, s as u64]);
        let classifier = train_classifier(&z_tr, &y_tr, &z_va, &y_va, n_classes, cfg, clf_seed)?;
        let pred = argmax_rows(&classifier.forward_eval(&z_te)?);
        Ok(DownstreamRun {
            seed_index: s,
            balanced_accuracy: balanced_accuracy(&y_te, &pred, n_classes)?,
            classifier,
        })
    })
}

/// Accuracy with `dropped` groups missing, over every such combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub dropped: usize,
    pub n_subsets: usize,
    /// Indexed `[subset][classifier]`, subsets in increasing mask order.
    pub accuracies: Vec<Vec<f64>>,
    pub mean_accuracy: f64,
}

/// For each drop count `0..m`, scores the given classifiers on test latents
/// inferred from the remaining groups, averaging over all dropped sets.
pub fn mask_eval(
    model: &EnVae,
    classifiers: &[Mlp],
    x_test: &Matrix,
    y_test: &[usize],
    n_classes: usize,
    reduction: LatentReduction,
) -> Result<Vec<MaskRow>> {
    let m = model.n_groups();
    let full = GroupMask::full(m);
    let posts = model.encode_groups(x_test)?;
    let l = model.latent_dim();
    let mut rows: Vec<MaskRow> = (0..m)
        .map(|d| MaskRow {
            dropped: d,
            n_subsets: 0,
            accuracies: vec![],
            mean_accuracy: 0.0,
        })
        .collect();
    let mut available: Vec<GroupMask> = full.nonempty_subsets();
    available.sort_by_key(|a| (m - a.count(), full.without(*a).0));
    for avail in available {
        let latent = match reduction {
            LatentReduction::PoeFull => {
                let experts: Vec<_> = avail.groups().map(|g| &posts[g]).collect();
                fuse_batches(&experts, l, model.include_prior())?.mean
            }
            LatentReduction::MixtureMean => model.infer_latent(x_test, avail, reduction)?.mean,
        };
        let accs = classifiers
            .iter()
            .map(|c| balanced_accuracy(y_test, &argmax_rows(&c.forward_eval(&latent)?), n_classes))
            .collect::<Result<Vec<f64>>>()?;
        let row = &mut rows[m - avail.count()];
        row.n_subsets += 1;
        row.accuracies.push(accs);
    }
    for row in &mut rows {
        let all: Vec<f64> = row.accuracies.iter().flatten().copied().collect();
        row.mean_accuracy = all.iter().sum::<f64>() / all.len() as f64;
    }
    Ok(rows)
}
