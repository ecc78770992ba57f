//! Seed derivation. Every random stream in the simulator is keyed by
//! `derive(master, tag, index)` so any component can be re-run in isolation.
//!
//! The derivation is portable and fully specified:
//!
//! ```text
//! fnv1a64(tag)        = standard 64-bit FNV-1a over the UTF-8 bytes
//! mix64(z)            = SplitMix64 finalizer:
//!                         z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//!                         z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//!                         z ^ (z >> 31)
//! derive(m, tag, i)   = mix64(mix64(m ^ fnv1a64(tag)) ^ mix64(i + 0x9e3779b97f4a7c15))
//! ```
//!
//! All arithmetic wraps modulo 2⁶⁴. Streams are ChaCha8 seeded from the
//! derived value via `seed_from_u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    mix64(mix64(master ^ fnv1a64(tag.as_bytes())) ^ mix64(index.wrapping_add(GOLDEN)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: &str, index: u64) -> Rng {
    rng(derive(master, tag, index))
}
