//! Deterministic RNG streams.
//!
//! Every stochastic procedure derives an independent stream from a user seed
//! plus a stream index, so results do not depend on scheduling or worker
//! count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream for replication (or bootstrap replicate) `index` of experiment `seed`.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha12Rng {
    // SplitMix64-style mixing keeps nearby (seed, index) pairs uncorrelated
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&mix(seed).to_le_bytes());
    key[8..16].copy_from_slice(&mix(index.wrapping_add(0x9e3779b97f4a7c15)).to_le_bytes());
    key[16..24].copy_from_slice(&mix(seed ^ index.rotate_left(17)).to_le_bytes());
    key[24..32].copy_from_slice(&mix(seed.wrapping_mul(3).wrapping_add(index)).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Derives a child seed for a nested stochastic procedure (bootstrap inside
/// replication `index`, split choice, ...). `tag` separates procedures.
pub fn substream_seed(seed: u64, index: u64, tag: u64) -> u64 {
    mix(mix(seed) ^ mix(index.wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))))
}

fn mix(mut v: u64) -> u64 {
    v = v.wrapping_add(0x9e3779b97f4a7c15);
    v = (v ^ (v >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94d049bb133111eb);
    v ^ (v >> 31)
}
