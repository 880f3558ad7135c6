//! Deterministic RNG substream derivation.
//!
//! Every random decision in a campaign flows from a per-(seed, insertion,
//! trial) substream so that trial outcomes do not depend on execution order
//! or worker scheduling, and so that identical configs reproduce identical
//! corpora byte for byte on any platform.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// FNV-1a over a byte string. Stable across platforms and Rust releases,
/// unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-mode mix of an arbitrary list of words into one stream key.
pub fn mix(words: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3; // pi fraction, arbitrary non-zero start
    for (i, &w) in words.iter().enumerate() {
        acc = splitmix64(acc ^ w.wrapping_add(splitmix64(i as u64 + 1)));
    }
    acc
}

/// Derive an independent ChaCha8 stream for a (root seed, seed id, insertion,
/// trial) coordinate. Any of the coordinates may be a plain counter.
pub fn substream(root: u64, seed_hash: u64, insertion: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[root, seed_hash, insertion, trial]))
}

/// Substream keyed by a single index, for per-ray / per-point fan-out.
pub fn indexed_stream(base: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[base, index]))
}
