//! Seeded random streams.
//!
//! All randomness comes from xoshiro256** seeded through SplitMix64
//! (`seed_from_u64`). Integer ranges use the multiply-shift reduction
//! `(x · n) >> 64`; normals use the ziggurat sampler of `rand_distr`.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

/// Deterministic random stream.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this seed and a label.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("finite std").sample(&mut self.inner)
    }

    pub fn normals(&mut self, n: usize, mean: f64, std: f64) -> Vec<f64> {
        let dist = Normal::new(mean, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.inner)).collect()
    }
}
