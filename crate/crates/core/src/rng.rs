//! Counter-based randomness.
//!
//! Every random quantity is a pure function of a key: cell selections hash
//! `(seed, row label, column label)`, and each Monte Carlo replication derives
//! its own stream seeds from `(base seed, replication, stream name)`. Results
//! therefore never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    mix64(state.wrapping_add(GOLDEN) ^ word.wrapping_mul(GOLDEN))
}

/// Uniform draw in `[0, 1)` attached to one cell of one sketch.
#[inline]
pub fn cell_uniform(seed: u64, i: i64, j: i64) -> f64 {
    let h = absorb(absorb(absorb(0, seed), i as u64), j as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for the named stream of replication `rep`.
pub fn derive_seed(base: u64, rep: u64, stream: &str) -> u64 {
    absorb(absorb(absorb(0, base), rep), hash_name(stream))
}

/// Deterministic generator for the named stream of replication `rep`.
pub fn stream_rng(base: u64, rep: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, rep, stream))
}
