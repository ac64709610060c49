//! Seed derivation and the generator type used everywhere.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded with a
//! 64-bit value. Sub-streams are derived with SplitMix64 so that independent
//! parts of one trial (prior ensemble, perturbations, ...) never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a hash, used to turn experiment ids into integers.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a parent seed and a tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Trial seed `mix(master, experiment id, i)`:
/// `splitmix64(splitmix64(master) ^ splitmix64(fnv1a(id)) ^ splitmix64(i + 1))`.
pub fn mix(master: u64, experiment_id: &str, index: u64) -> u64 {
    splitmix64(
        splitmix64(master)
            ^ splitmix64(fnv1a(experiment_id.as_bytes()))
            ^ splitmix64(index.wrapping_add(1)),
    )
}

/// Stream tags for the sub-streams of one trial.
pub mod stream {
    pub const PRIOR: u64 = 1;
    pub const PERTURBATION: u64 = 2;
    pub const PROBLEM: u64 = 3;
    pub const ORACLE: u64 = 4;
    pub const PARTICLE: u64 = 5;
}
