//! Deterministic seed derivation.
//!
//! Every random choice in the simulator is keyed by a master seed plus a
//! stream tag and context indices (client id, round, epoch, batch). Tests
//! and reference implementations re-derive the exact same streams, which is
//! what makes full experiment runs byte-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags separating independent usages of the same master seed.
pub mod stream {
    pub const BLOB_MEANS: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const SUBSAMPLE: u64 = 0x03;
    pub const AUGMENT: u64 = 0x04;
    pub const MODEL_INIT: u64 = 0x05;
    pub const CLIENT_SAMPLING: u64 = 0x06;
    pub const BATCH_SHUFFLE: u64 = 0x07;
    pub const ENCRYPTION: u64 = 0x08;
    pub const KEYGEN: u64 = 0x09;
}

/// splitmix64 finalizer; full-avalanche mixing of a 64-bit word.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fold a sequence of context words into a derived seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for &t in tags {
        acc = splitmix(acc ^ t.wrapping_mul(0xd6e8feb86659fd93));
    }
    acc
}

/// Deterministic generator for a derived stream.
pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(seed, tags))
}

/// Deterministic generator seeded directly.
pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
