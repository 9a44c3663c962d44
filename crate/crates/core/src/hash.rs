//! Seeded 64-bit mixing hash and the seed-derivation rule shared by every
//! randomized component (bucket placement, CM rows, stream sampling).
//!
//! Sub-stream `k` of a master seed is always `derive_seed(master, k)`, so any
//! run is replayable from the master seed alone.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; a bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `k` of `master` (the mix(master, k) rule).
#[inline]
pub fn derive_seed(master: u64, k: u64) -> u64 {
    mix64(master.wrapping_add(GAMMA.wrapping_mul(k.wrapping_add(1))))
}

/// Seeded hash of an item id.
#[inline]
pub fn item_hash(seed: u64, item: u64) -> u64 {
    mix64(seed ^ mix64(item.wrapping_mul(GAMMA)))
}

/// Multiply-shift reduction of a full-width hash onto `[0, m)`.
#[inline]
pub fn reduce(h: u64, m: u64) -> u64 {
    debug_assert!(m > 0);
    (((h as u128) * (m as u128)) >> 64) as u64
}

/// Slot of `item` among `m` slots under `seed`.
#[inline]
pub fn slot(seed: u64, item: u64, m: u64) -> u64 {
    reduce(item_hash(seed, item), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn mix64_is_injective_on_sample() {
        let mut seen = HashSet::new();
        for x in 0..10_000u64 {
            assert!(seen.insert(mix64(x)));
        }
    }

    #[test]
    fn reduce_stays_in_range() {
        for m in [1u64, 2, 3, 7, 200, 1 << 40] {
            for h in [0u64, 1, u64::MAX, 0x8000_0000_0000_0000, 12345] {
                assert!(reduce(h, m) < m);
            }
        }
    }

    #[test]
    fn derived_seeds_differ_across_streams() {
        let mut seen = HashSet::new();
        for k in 0..1000 {
            assert!(seen.insert(derive_seed(42, k)));
        }
        assert_ne!(derive_seed(42, 0), derive_seed(43, 0));
    }

    #[test]
    fn slot_is_deterministic_and_seed_sensitive() {
        assert_eq!(slot(7, 123, 200), slot(7, 123, 200));
        let moved = (0..1000u64).filter(|&i| slot(7, i, 200) != slot(8, i, 200)).count();
        assert!(moved > 900, "changing the seed moved only {moved}/1000 items");
    }
}
