//! Stable, process-independent hashing.
//!
//! Everything that ends up on disk or decides placement (bucket numbers,
//! file ids, ring points, directory affinity) must hash identically across
//! processes, platforms and releases, so `std`'s randomized `DefaultHasher`
//! is off limits here. XXH3 has a frozen specification.

use xxhash_rust::xxh3::{xxh3_128, xxh3_64, xxh3_64_with_seed};

/// 64-bit stable hash of arbitrary bytes.
#[inline]
pub fn stable_hash(bytes: &[u8]) -> u64 {
    xxh3_64(bytes)
}

#[inline]
pub fn stable_hash_seeded(bytes: &[u8], seed: u64) -> u64 {
    xxh3_64_with_seed(bytes, seed)
}

#[inline]
pub fn stable_hash128(bytes: &[u8]) -> u128 {
    xxh3_128(bytes)
}

/// SplitMix64 finalizer. Used to expand a 64-bit key into a well mixed stream.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash onto the open unit interval (0, 1).
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    ((h >> 12) as f64 + 0.5) / (1u64 << 52) as f64
}
