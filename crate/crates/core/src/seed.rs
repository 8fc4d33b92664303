//! Seed derivation for independent random streams.
//!
//! Every stream is keyed by a tuple of integers so that the bits drawn by a
//! client in a given round do not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of keys into a single 64-bit seed.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng(base: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, keys))
}

/// Stream tags, so that different consumers of the same (seed, round, client)
/// never share bits.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const CLIENT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const DATA_TRAIN: u64 = 4;
    pub const DATA_EVAL: u64 = 5;
    pub const DATA_MEANS: u64 = 6;
    pub const THEORY: u64 = 7;
    pub const EVAL_ATTACK: u64 = 8;
}
