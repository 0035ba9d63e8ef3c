//! Deterministic stream derivation.
//!
//! Every randomized operation derives an independent ChaCha8 stream from a
//! user seed plus a purpose tag and an index (path index, record index, ...).
//! Streams are independent of scheduling, so parallel simulation reproduces
//! bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purpose tags. Distinct tags decorrelate streams that share a seed.
pub mod tag {
    pub const PATH: u64 = 0x70617468; // "path"
    pub const INIT: u64 = 0x696e6974; // "init"
    pub const OBS_TIMES: u64 = 0x6f627374; // "obst"
    pub const REWARD_NOISE: u64 = 0x726e6f69; // "rnoi"
    pub const PROBE: u64 = 0x70726f62; // "prob"
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from (seed, tag, index).
pub fn derive_key(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index)
}

/// A ChaCha8 stream keyed by (seed, tag, index).
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, tag, index))
}
