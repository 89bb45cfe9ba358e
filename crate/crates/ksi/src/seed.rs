//! Seed derivation.
//!
//! Every source of randomness in a run flows from the single `seed` config
//! key. Subsystems get independent streams by deriving a sub-seed from a
//! fixed string label, so adding or removing one consumer never shifts the
//! stream seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; stable across platforms.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from the master seed and a subsystem label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then SplitMix64 to decorrelate from the master.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

/// Seeded generator for a subsystem stream.
pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
