//! Deterministic RNG derivation.
//!
//! Every stochastic component draws from a [`ChaCha12Rng`] derived from the
//! experiment seed plus a fixed tag path (client id, round, purpose). Streams
//! are therefore independent of scheduling order, which keeps multi-threaded
//! runs bit-identical to single-threaded ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags distinguishing independent consumers of randomness.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const PHASE2: u64 = 7;
    pub const BYZANTINE: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent RNG from a master seed and a tag path.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0xe703_7ed1_a0b4_28db));
    }
    ChaCha12Rng::seed_from_u64(state)
}
