//! Seeded random streams.
//!
//! All randomness goes through [`ChaCha8Rng`] so results are identical
//! across platforms. Independent streams are derived from a master seed with
//! [`derive_seed`], a SplitMix64 finalizer over `master + golden * (index + 1)`;
//! adding new streams never changes existing ones.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags used when deriving per-purpose seeds from a run seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const FLATNESS: u64 = 5;
    pub const PERTURB: u64 = 6;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(GOLDEN.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
