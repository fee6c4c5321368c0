//! Semi-supervised structural regularization.
//!
//! A structural regularizer is a triplet of pseudo-labeler, data transform
//! and structural loss. This crate provides the pieces and a batch-wise
//! trainer that binds them to an MLP classifier:
//!
//! * [`autodiff`]: define-by-run reverse-mode differentiation;
//! * [`data`]: datasets, label masking, generators, rescaling, batch sampling;
//! * [`model`]: the classifier, SGD with weight decay, the EMA teacher;
//! * [`regularize`]: pseudo-labelers, consistency / Mixup / εmu transforms, losses;
//! * [`trainer`]: run configuration, the training step, checkpoints;
//! * [`metrics`]: error rate, label quality, entropy, inter-pair distance.

pub mod autodiff;
pub mod data;
pub mod metrics;
pub mod model;
pub mod regularize;
pub mod trainer;

use rand::SeedableRng;

/// RNG used for every stream; its state serializes into checkpoints.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
