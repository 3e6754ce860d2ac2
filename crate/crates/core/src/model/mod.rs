//! The ensemble model: random feature grouping, per-group experts, subset
//! posteriors, the mixture ELBO and missing-group inference.

mod checkpoint;
mod envae;
mod grouping;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use envae::{
    fuse_batches, joint_posterior, subset_posteriors, ElboMode, ElboTerms, EnVae, HeadConfig,
    LatentReduction, ModelConfig, ModelGrads, SubsetPosteriors, MAX_ENUMERATED_GROUPS,
};
pub use grouping::{
    ensemble_param_count, expert_param_count, expert_widths_for_budget, make_grouping,
    FeatureGrouping, GroupMask, BASELINE_HIDDEN, MAX_GROUPS,
};
