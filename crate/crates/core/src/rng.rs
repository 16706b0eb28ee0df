//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a mixed `u64`, so results never depend on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Named streams so that the data order, corruption sampling and weight
/// initialisation never share state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Corruption = 2,
    Init = 3,
    Synth = 4,
    Sampling = 5,
}

pub fn stream_rng(seed: u64, stream: Stream, extra: &[u64]) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(extra.len() + 2);
    parts.push(seed);
    parts.push(stream as u64);
    parts.extend_from_slice(extra);
    rng_from(&parts)
}
