//! Seed plumbing. Every random decision in the crate draws from a
//! `ChaCha8Rng` whose seed is derived from a base seed and a stream tag, so
//! runs are reproducible bit-for-bit and independent streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `base` and an ordered list of stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(base), |acc, &t| mix64(acc ^ mix64(t)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used across the crate.
pub mod stream {
    pub const MIXTURE_INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const KMEANS: u64 = 3;
    pub const FEEDBACK: u64 = 4;
    pub const INITIAL_FEEDBACK: u64 = 5;
    pub const PHANTOM: u64 = 6;
    pub const PARAMS: u64 = 7;
    pub const TRAIN: u64 = 8;
    pub const SUBSET: u64 = 9;
    pub const NOISE: u64 = 10;
}
