//! The single random source used for dataset generation, weight init and shuffling.
//!
//! Raw bits come from ChaCha8 (`rand_chacha::ChaCha8Rng`, seeded through
//! `SeedableRng::seed_from_u64`). Every derived quantity is computed here with a
//! fixed formula so that a port only has to reproduce ChaCha8 and these few lines:
//!
//! * `uniform()`      = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * `below(n)`       = `(next_u64() as u128 * n) >> 64` (multiply-shift, no rejection)
//! * `shuffle(xs)`    = Fisher-Yates from the back, `j = below(i + 1)`

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream for a named purpose from a base seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut base = Self::new(seed);
        let mixed = base.next_u64() ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as i64
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
