//! Sub-seed derivation.
//!
//! All randomness in a run flows from one 64-bit seed. Independent random
//! streams (per-volume sampling, per-sample masking, per-epoch shuffles,
//! per-trial search draws, ...) are derived as
//! `derive(base, tag, index)` where `tag` names the stream and `index`
//! numbers its instances. The derivation is a splitmix64 mix of the base
//! seed, an FNV-1a hash of the tag and the index, so streams are
//! decorrelated and stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the seed of the sub-stream `(tag, index)` from a base seed.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(tag.as_bytes())) ^ index)
}

/// A deterministic RNG for the sub-stream `(tag, index)`.
pub fn rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, index))
}
