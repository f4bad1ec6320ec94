//! Derivation of independent, reproducible random streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`; distinct tag lists give unrelated seeds.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const DATA_ORDER: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const PROJECTORS: u64 = 3;
    pub const DEPTH_TEACHER: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const MODEL: u64 = 6;
}
