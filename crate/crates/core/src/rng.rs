//! Deterministic seeding utilities.
//!
//! Every random draw in the crate flows through a ChaCha8 generator seeded by
//! mixing a master seed with purpose tags, so identical configurations run
//! bit-identically on any platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// splitmix64 finalizer; the standard 64-bit avalanche mix.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of tags into a new derived seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut z = splitmix(seed);
    for &t in tags {
        z = splitmix(z ^ splitmix(t));
    }
    z
}

/// FNV-1a over raw bytes; the crate's digest for artifact integrity.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a seed from a string label, for name-keyed initialization.
pub fn hash_name(name: &str) -> u64 {
    fnv64(name.as_bytes())
}

/// A portable, seed-stable generator.
pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` independent standard normal draws.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
