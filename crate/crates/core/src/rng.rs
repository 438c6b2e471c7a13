//! Seed derivation for reproducible sub-streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! derived from the experiment master seed plus a stream tag and position
//! indices. Streams are therefore independent of each other and of execution
//! order, which is what makes parallel and sequential runs produce identical
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used to separate the independent random substreams of a run.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const HARVEST: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const CHANNEL: u64 = 5;
    pub const SCHEDULE: u64 = 6;
    pub const GAIN: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const REPLICATE: u64 = 9;
    pub const PROBE: u64 = 10;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an ordered list of indices.
///
/// The fold is order-sensitive, so `&[a, b]` and `&[b, a]` give unrelated
/// seeds.
pub fn subseed(master: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix(master);
    for &p in parts {
        acc = splitmix(acc ^ splitmix(p));
    }
    acc
}

/// A ChaCha generator seeded from the derived sub-stream seed.
pub fn rng_from(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(master, parts))
}
