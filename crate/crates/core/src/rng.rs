//! Seeded randomness.
//!
//! Every stochastic routine takes an explicit [`SimRng`]. The generator is
//! ChaCha8 (a 64-bit-seeded, counter-based stream cipher generator), whose
//! output is specified independently of platform, so identical seeds yield
//! identical datasets, initializations and noise everywhere.
//!
//! Child seeds are derived with the SplitMix64 finalizer so that streams for
//! different purposes (class `m`, image `i`, batch `b`, ...) never overlap in
//! practice and do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and a path of stream tags.
pub fn derive_seed(parent: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(parent), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn standard_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut SimRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| standard_normal(rng)).collect()
}
