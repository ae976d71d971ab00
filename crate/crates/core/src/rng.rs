//! Seeded random streams. Every random draw in a run descends from one seed;
//! independent consumers (init, shuffling, attack noise, folds) get their own
//! ChaCha stream so that changing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_ATTACK: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_DATA: u64 = 5;
pub const STREAM_NOISE: u64 = 6;
pub const STREAM_INJECT: u64 = 7;
pub const STREAM_SUBSET: u64 = 8;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed, e.g. the seed of fold `i` from a purification seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
