//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! derived from a tuple of integers, so results do not depend on evaluation
//! order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with further coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x9E37_79B9_7F4A_7C15);
    for &c in coords {
        h = mix(h ^ mix(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, coords))
}

/// Stream tags that keep independent uses of the same seed apart.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const LOSS_NOISE: u64 = 5;
    pub const RECON_NOISE: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const PROJECTION: u64 = 8;
    pub const DATA: u64 = 9;
}
