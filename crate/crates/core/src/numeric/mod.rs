//! Dense linear algebra and the small differentiable substrate used by the
//! models: MLPs with manual backward passes, Adam, clipping, seeded RNG.

pub mod loss;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use loss::{argmax_rows, softmax_cross_entropy};
pub use matrix::Matrix;
pub use mlp::{Activation, BatchNorm, Layer, Mlp, MlpCache, MlpGrads, MlpSpec, Mode};
pub use optim::{clip_global_norm, global_norm, Adam, AdamState};
pub use rng::{derive_seed, seeded_rng, Rng};
