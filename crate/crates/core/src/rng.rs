//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a `Xoshiro256PlusPlus` whose seed is a
//! hash of a master seed and a small tuple of indices, so results never
//! depend on iteration order or thread schedule.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rand_distr::StandardNormal;

pub type StreamRng = Xoshiro256PlusPlus;

/// Stream tags keep substreams for different purposes disjoint.
pub mod tag {
    pub const AUX_OFFSETS: u64 = 0x6175_785f_6f66_6673;
    pub const COLLAPSE: u64 = 0x636f_6c6c_6170_7365;
    pub const PERTURBATION: u64 = 0x7065_7274_7572_6221;
    pub const TEXTURE: u64 = 0x7465_7874_7572_6521;
    pub const ITERATION: u64 = 0x6974_6572_6174_696f;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed together with any number of indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn seeded(seed: u64) -> StreamRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Independent stream for `(seed, tag, index)`.
pub fn substream(seed: u64, tag: u64, index: u64) -> StreamRng {
    seeded(derive_seed(seed, &[tag, index]))
}

#[inline]
pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
