//! Named random streams.
//!
//! Every stochastic step draws from its own stream, derived from the experiment
//! seed and a path of tags (round, client, epoch, ...). A stream depends only on
//! its path, so work can be scheduled on any worker in any order.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

/// Stream tags. Values are arbitrary but fixed; changing one changes results.
pub mod tag {
    pub const SYNTHETIC: u64 = 0x5359_4e54;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const INIT: u64 = 0x494e_4954;
    pub const PRETRAIN: u64 = 0x5052_4554;
    pub const BATCHES: u64 = 0x4241_5443;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const PARTICIPATION: u64 = 0x5041_5254_4943;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a path of tags.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, path))
}
