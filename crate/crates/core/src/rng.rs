//! Seeded randomness shared by every sampling step.
//!
//! All sampling goes through SplitMix64 (64-bit state). Index draws use
//! `next_u64() % n` so that support sets and batch orders can be reproduced
//! from the seed alone in any language that implements SplitMix64.

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Uniform index in `0..n`. `n` must be positive.
#[inline]
pub fn index_below(rng: &mut SplitMix64, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// Uniform float in `[0, 1)` from the top 53 bits.
#[inline]
pub fn unit_f64(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Partial Fisher-Yates: after the call the first `take` slots of `items`
/// hold a uniform sample without replacement, in draw order.
pub fn partial_shuffle<T>(rng: &mut SplitMix64, items: &mut [T], take: usize) {
    let n = items.len();
    for i in 0..take.min(n) {
        let j = i + index_below(rng, n - i);
        items.swap(i, j);
    }
}

pub fn shuffle<T>(rng: &mut SplitMix64, items: &mut [T]) {
    let n = items.len();
    partial_shuffle(rng, items, n);
}
