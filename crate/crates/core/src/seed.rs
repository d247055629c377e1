//! Deterministic seed derivation.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by
//! `derive(master, &[step, role, ...])`, so any component can be replayed on
//! its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream roles used by the trainer.
pub mod role {
    pub const VIEW_A: u64 = 1;
    pub const VIEW_B: u64 = 2;
    pub const DROPOUT_ONLINE: u64 = 3;
    pub const DROPOUT_TARGET: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const QUEUE: u64 = 7;
    pub const CORPUS: u64 = 8;
    pub const EVAL_PAIRS: u64 = 9;
}
