use serde::{Deserialize, Serialize};

use crate::numeric::{Matrix, MlpSpec, Rng};
use crate::{Error, Result};

/// Largest group count supported by [`GroupMask`].
pub const MAX_GROUPS: usize = 30;

/// A set of feature groups as a bitmask; bit `i` is group `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupMask(pub u32);

impl GroupMask {
    pub const EMPTY: GroupMask = GroupMask(0);

    /// All of groups `0..m`.
    pub fn full(m: usize) -> Self {
        debug_assert!(m <= MAX_GROUPS);
        GroupMask(((1u64 << m) - 1) as u32)
    }

    pub fn single(i: usize) -> Self {
        GroupMask(1 << i)
    }

    pub fn from_groups(groups: impl IntoIterator<Item = usize>) -> Self {
        GroupMask(groups.into_iter().fold(0, |acc, g| acc | (1 << g)))
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: GroupMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn without(self, other: GroupMask) -> Self {
        GroupMask(self.0 & !other.0)
    }

    /// Member group indices in increasing order.
    pub fn groups(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.contains(i))
    }

    /// Every non-empty subset, in increasing numeric order.
    pub fn nonempty_subsets(self) -> Vec<GroupMask> {
        let mut out = Vec::with_capacity((1usize << self.count()) - 1);
        // walk submasks downward then reverse
        let mut s = self.0;
        while s != 0 {
            out.push(GroupMask(s));
            s = (s - 1) & self.0;
        }
        out.reverse();
        out
    }
}

/// Partition of `D` feature indices into `m` disjoint, near-equal groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGrouping {
    n_features: usize,
    groups: Vec<Vec<usize>>,
    seed: u64,
}

impl FeatureGrouping {
    /// Checks that `groups` is a partition of `0..n_features` into non-empty parts.
    pub fn from_groups(n_features: usize, groups: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if groups.is_empty() || groups.len() > MAX_GROUPS {
            return Err(Error::invalid(format!(
                "group count {} outside 1..={MAX_GROUPS}",
                groups.len()
            )));
        }
        let mut seen = vec![false; n_features];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::invalid("empty feature group"));
            }
            for &f in g {
                if f >= n_features || seen[f] {
                    return Err(Error::invalid(format!(
                        "feature {f} out of range or assigned twice"
                    )));
                }
                seen[f] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("grouping does not cover every feature"));
        }
        Ok(Self {
            n_features,
            groups,
            seed,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Group index of every feature.
    pub fn assignment(&self) -> Vec<usize> {
        let mut a = vec![0; self.n_features];
        for (g, feats) in self.groups.iter().enumerate() {
            for &f in feats {
                a[f] = g;
            }
        }
        a
    }

    /// Columns of `x` belonging to group `i`.
    pub fn slice(&self, x: &Matrix, i: usize) -> Matrix {
        x.select_columns(&self.groups[i])
    }

    /// Reassembles per-group column blocks into original feature order.
    pub fn scatter(&self, blocks: &[Matrix]) -> Result<Matrix> {
        if blocks.len() != self.groups.len() {
            return Err(Error::shape(format!(
                "{} blocks for {} groups",
                blocks.len(),
                self.groups.len()
            )));
        }
        let rows = blocks[0].rows();
        let mut out = Matrix::zeros(rows, self.n_features);
        for (g, block) in blocks.iter().enumerate() {
            out.scatter_columns(&self.groups[g], block)?;
        }
        Ok(out)
    }
}

/// Random permutation of `0..D` cut into `m` contiguous blocks whose sizes
/// differ by at most one; features are sorted within each group.
pub fn make_grouping(n_features: usize, m: usize, seed: u64) -> Result<FeatureGrouping> {
    if m < 1 || m > n_features {
        return Err(Error::invalid(format!(
            "group count {m} must be in 1..={n_features}"
        )));
    }
    if m > MAX_GROUPS {
        return Err(Error::invalid(format!("at most {MAX_GROUPS} groups are supported")));
    }
    let perm = Rng::substream(seed, &[0x6209]).permutation(n_features);
    let base = n_features / m;
    let extra = n_features % m;
    let mut groups = Vec::with_capacity(m);
    let mut start = 0;
    for g in 0..m {
        let len = base + usize::from(g < extra);
        let mut block = perm[start..start + len].to_vec();
        block.sort_unstable();
        groups.push(block);
        start += len;
    }
    FeatureGrouping::from_groups(n_features, groups, seed)
}

/// Hidden widths of the reference single-encoder model.
pub const BASELINE_HIDDEN: [usize; 2] = [128, 128];

/// Weights and biases of one encoder (`d → hidden → 2L`) plus one decoder
/// (`L → hidden → d`).
pub fn expert_param_count(d: usize, latent_dim: usize, hidden: &[usize]) -> usize {
    let rev: Vec<usize> = hidden.iter().rev().copied().collect();
    MlpSpec::new(d, hidden, 2 * latent_dim).weight_count()
        + MlpSpec::new(latent_dim, &rev, d).weight_count()
}

/// Total over experts for near-equal groups of `D` features.
pub fn ensemble_param_count(n_features: usize, latent_dim: usize, m: usize, hidden: &[usize]) -> usize {
    let base = n_features / m;
    let extra = n_features % m;
    (0..m)
        .map(|g| expert_param_count(base + usize::from(g < extra), latent_dim, hidden))
        .sum()
}

/// Per-expert hidden widths `[h, h]` whose total parameter count across all
/// `m` experts is closest to the single-model baseline, which must be within
/// ±10%. Searches `h ∈ [4, 1024]`.
pub fn expert_widths_for_budget(
    n_features: usize,
    latent_dim: usize,
    m: usize,
    baseline_hidden: &[usize],
) -> Result<Vec<usize>> {
    if m < 1 || m > n_features {
        return Err(Error::invalid(format!(
            "group count {m} must be in 1..={n_features}"
        )));
    }
    let budget = expert_param_count(n_features, latent_dim, baseline_hidden) as f64;
    if m == 1 {
        return Ok(baseline_hidden.to_vec());
    }
    let depth = baseline_hidden.len();
    let (best_h, best_gap) = (4..=1024usize)
        .map(|h| {
            let total = ensemble_param_count(n_features, latent_dim, m, &vec![h; depth]) as f64;
            (h, (total - budget).abs())
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)))
        .expect("non-empty range");
    if best_gap > 0.1 * budget {
        return Err(Error::invalid(format!(
            "no hidden width in [4, 1024] keeps {m} experts within 10% of {budget} parameters"
        )));
    }
    Ok(vec![best_h; depth])
}
