//! Key-to-granule routing over the hashed key space.

use std::ops::Range;

/// Hashed keys live in `[0, KEY_SPACE)`.
pub const KEY_SPACE: u64 = 1 << 20;

/// Default number of granules per stage.
pub const DEFAULT_GRANULES: u32 = 64;

/// Maps a hashed key to the granule owning its key range.
///
/// The key space is split into `n` equal half-open ranges; `n` must divide
/// `key_space` and `key` must be below it (checked by callers).
#[inline]
pub fn granule_index_for_key(key: u64, n: u32, key_space: u64) -> u32 {
    debug_assert!(n >= 1 && key_space.is_multiple_of(n as u64));
    debug_assert!(key < key_space);
    (key / (key_space / n as u64)) as u32
}

/// Half-open key range of granule `index`.
pub fn granule_key_range(index: u32, n: u32, key_space: u64) -> Range<u64> {
    let width = key_space / n as u64;
    let lo = index as u64 * width;
    lo..lo + width
}

/// Range partitioning of the hashed key space into `partitions` buckets,
/// used by the compute-centric baseline. Unlike granules, `partitions` need
/// not divide the key space.
#[inline]
pub fn partition_for_key(key: u64, partitions: u32, key_space: u64) -> u32 {
    ((key as u128 * partitions as u128) / key_space as u128) as u32
}
