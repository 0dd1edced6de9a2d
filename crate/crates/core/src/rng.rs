//! Seed derivation.
//!
//! Every stochastic operation takes an explicit `u64` seed. Per-task seeds
//! are derived from a root seed by hashing `(root, stream, index)` with
//! SplitMix64, so work can be reordered or parallelised without changing
//! any sampled value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named seed streams used by the pipeline.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const STAGE1: u64 = 2;
    pub const STAGE2: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const HOLDOUT: u64 = 6;
    pub const VIEWS: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const NOISE: u64 = 9;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for task `index` of `stream` under `root`.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
