//! Seed substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! master seed plus a path of integers (stage, trial, environment index,
//! sample index, ...). Two different paths never share a stream, so results
//! do not depend on evaluation order or on how work is split across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stage tags used as the first path element of pipeline substreams.
pub mod stage {
    pub const DEMO_ENVS: u64 = 1;
    pub const TRAIN_ENVS: u64 = 2;
    pub const TEST_ENVS: u64 = 3;
    pub const CLONE: u64 = 4;
    pub const FINETUNE: u64 = 5;
    pub const CERTIFY: u64 = 6;
    pub const EVALUATE: u64 = 7;
    pub const WEIGHT_INIT: u64 = 8;
    pub const TRIAL: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a 64-bit key from a seed and a path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    // length is mixed in so that [a] and [a, 0] differ
    let mut h = splitmix64(seed ^ splitmix64(path.len() as u64));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
