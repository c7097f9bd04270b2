//! Deterministic seed derivation.
//!
//! Every random decision in the crate (weight initialization, shuffling,
//! stratified sampling, scene synthesis) flows from a `u64` seed through
//! [`ChaCha8Rng`], a portable, versioned generator that produces the same
//! stream on every platform. Derived seeds are computed with [`mix`], a
//! splitmix64 chain, so that each (cell, repeat, purpose) gets an
//! independent, position-derived stream that does not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer: one full avalanche round over a 64-bit word.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a sequence of words by absorbing
/// each word into a splitmix64 chain: `h ← splitmix64(h ^ word)`.
pub fn mix(base: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// A deterministic generator for the given seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
