//! Stratified train/valid/test plans.
//!
//! All allocations use the largest-remainder (Hamilton) method: floor every
//! quota, then hand leftover units to the largest fractional remainders,
//! breaking ties by lower index.

use serde::{Deserialize, Serialize};

use crate::numeric::Rng;
use crate::{Error, Result};

/// Train / valid / test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.72, 0.08, 0.20];

/// Disjoint index sets of one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    /// Checks disjointness and that all indices fall in `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n {
                return Err(Error::invalid(format!("split index {i} outside 0..{n}")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("split index {i} used twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Splits `total` units across `weights` proportionally, largest remainder first.
pub fn hamilton_allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

fn indices_by_class(y: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        by_class[c].push(i);
    }
    by_class
}

/// Single stratified split: each class is shuffled and cut per `fractions`.
pub fn stratified_split(
    y: &[usize],
    n_classes: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitPlan> {
    let mut plan = SplitPlan {
        fold: 0,
        seed,
        train: vec![],
        valid: vec![],
        test: vec![],
    };
    for (c, mut idx) in indices_by_class(y, n_classes).into_iter().enumerate() {
        if idx.len() < 3 {
            return Err(Error::data(format!(
                "class {c} has {} samples; a stratified split needs at least 3",
                idx.len()
            )));
        }
        Rng::substream(seed, &[0x5911_7, c as u64]).shuffle(&mut idx);
        let mut counts = hamilton_allocate(idx.len(), &fractions);
        if counts[0] == 0 {
            // keep every class in train
            let donor = if counts[2] > 0 { 2 } else { 1 };
            counts[donor] -= 1;
            counts[0] += 1;
        }
        plan.train.extend_from_slice(&idx[..counts[0]]);
        plan.valid
            .extend_from_slice(&idx[counts[0]..counts[0] + counts[1]]);
        plan.test.extend_from_slice(&idx[counts[0] + counts[1]..]);
    }
    plan.train.sort_unstable();
    plan.valid.sort_unstable();
    plan.test.sort_unstable();
    Ok(plan)
}

/// `k` stratified folds. Each class is shuffled and dealt round-robin, the
/// dealer continuing across classes, so fold sizes differ by at most one and
/// per-class counts by at most one.
pub fn stratified_folds(y: &[usize], n_classes: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let mut folds = vec![Vec::new(); k];
    let mut dealer = 0;
    for (c, mut idx) in indices_by_class(y, n_classes).into_iter().enumerate() {
        if idx.len() < k {
            return Err(Error::data(format!(
                "class {c} has {} samples, fewer than {k} folds",
                idx.len()
            )));
        }
        Rng::substream(seed, &[0xF01D, c as u64]).shuffle(&mut idx);
        for i in idx {
            folds[dealer % k].push(i);
            dealer += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Cross-validation plans: fold `f` is the test set; from the remainder a
/// stratified validation set of `round(valid_fraction · N)` samples is drawn
/// and the rest is train.
pub fn cv_plans(
    y: &[usize],
    n_classes: usize,
    k: usize,
    valid_fraction: f64,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    let folds = stratified_folds(y, n_classes, k, seed)?;
    let n = y.len();
    let n_valid = (valid_fraction * n as f64).round() as usize;
    let mut plans = Vec::with_capacity(k);
    for (f, test) in folds.iter().enumerate() {
        let mut in_test = vec![false; n];
        for &i in test {
            in_test[i] = true;
        }
        let pool: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
        let mut by_class = vec![Vec::new(); n_classes];
        for &i in &pool {
            by_class[y[i]].push(i);
        }
        let weights: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
        let valid_counts = hamilton_allocate(n_valid.min(pool.len()), &weights);
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (c, mut idx) in by_class.into_iter().enumerate() {
            Rng::substream(seed, &[0x7A11D, f as u64, c as u64]).shuffle(&mut idx);
            let nv = valid_counts[c].min(idx.len().saturating_sub(1));
            valid.extend_from_slice(&idx[..nv]);
            train.extend_from_slice(&idx[nv..]);
        }
        train.sort_unstable();
        valid.sort_unstable();
        plans.push(SplitPlan {
            fold: f,
            seed,
            train,
            valid,
            test: test.clone(),
        });
    }
    Ok(plans)
}

/// Stratified reduction of a plan's train set to `n_target` samples; the
/// validation set shrinks by the same ratio and the test set is untouched.
pub fn subsample_train(
    plan: &SplitPlan,
    y: &[usize],
    n_classes: usize,
    n_target: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if n_target > plan.train.len() {
        return Err(Error::invalid(format!(
            "cannot subsample {} train samples up to {n_target}",
            plan.train.len()
        )));
    }
    if n_target == plan.train.len() {
        return Ok(plan.clone());
    }
    let present = {
        let mut seen = vec![false; n_classes];
        for &i in &plan.train {
            seen[y[i]] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if n_target < present {
        return Err(Error::invalid(format!(
            "n_target {n_target} is smaller than the {present} classes in train"
        )));
    }
    let ratio = n_target as f64 / plan.train.len() as f64;
    let n_valid = if plan.valid.is_empty() {
        0
    } else {
        ((plan.valid.len() as f64 * ratio).round() as usize).max(1)
    };
    let train = stratified_take(&plan.train, y, n_classes, n_target, seed, 0)?;
    let valid = stratified_take(&plan.valid, y, n_classes, n_valid, seed, 1)?;
    Ok(SplitPlan {
        fold: plan.fold,
        seed: plan.seed,
        train,
        valid,
        test: plan.test.clone(),
    })
}

fn stratified_take(
    pool: &[usize],
    y: &[usize],
    n_classes: usize,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in pool {
        by_class[y[i]].push(i);
    }
    let weights: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
    let mut counts = hamilton_allocate(n, &weights);
    // every class present in the pool keeps at least one sample when n allows
    loop {
        let Some(empty) = (0..n_classes).find(|&c| counts[c] == 0 && !by_class[c].is_empty()) else {
            break;
        };
        let donor = (0..n_classes)
            .filter(|&c| counts[c] > 1)
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)));
        match donor {
            Some(d) => {
                counts[d] -= 1;
                counts[empty] += 1;
            }
            None => break,
        }
    }
    let mut out = Vec::with_capacity(n);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        Rng::substream(seed, &[0x5AB5, stream, c as u64]).shuffle(&mut idx);
        out.extend_from_slice(&idx[..counts[c].min(idx.len())]);
    }
    out.sort_unstable();
    Ok(out)
}
