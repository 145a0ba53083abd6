//! Deterministic random streams.
//!
//! All randomness in the crate (parameter init, shuffling, synthetic data)
//! flows through [`SeedRng`], a thin wrapper over ChaCha8 that adds the few
//! distributions we need. Keeping the distribution code here, on top of a
//! fixed generator, means a seed pins every downstream value regardless of
//! which `rand` crate version happens to be in the tree.

use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

use crate::fmath;

#[derive(Clone)]
pub struct SeedRng {
    inner: ChaCha8Rng,
    /// Second half of the last Box-Muller pair, if unused.
    spare_normal: Option<f32>,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Derives an independent stream from a base seed and a tag, so callers
    /// can give each task/run its own generator without the streams aliasing.
    pub fn derive(seed: u64, tag: u64) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 24 bits of precision.
    pub fn uniform(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = (self.next_u32() as f64 + 1.0) / 4294967296.0;
        let u2 = self.next_u32() as f64 / 4294967296.0;
        let r = fmath::sqrt(-2.0 * fmath::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some((r * libm::sin(theta)) as f32);
        (r * libm::cos(theta)) as f32
    }

    /// Unbiased integer in [0, n) (Lemire's method).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a nonempty range");
        let n = n as u64;
        loop {
            let x = self.next_u64();
            let (hi, lo) = mul_wide(x, n);
            // Reject the tiny biased tail and retry.
            if lo >= n.wrapping_neg() % n {
                return hi as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.index(i + 1);
            v.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        self.shuffle(&mut v);
        v
    }
}

fn mul_wide(a: u64, b: u64) -> (u64, u64) {
    let wide = (a as u128) * (b as u128);
    ((wide >> 64) as u64, wide as u64)
}

/// Mixes a base seed with a tag into a fresh seed. Nearby tags land far
/// apart, so per-task or per-run seeds derived this way do not alias.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// SplitMix64 finalizer; good avalanche for seed derivation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeedRng::new(7);
        let mut b = SeedRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_from_base_and_each_other() {
        let mut base = SeedRng::new(7);
        let mut d0 = SeedRng::derive(7, 0);
        let mut d1 = SeedRng::derive(7, 1);
        let (a, b, c) = (base.next_u64(), d0.next_u64(), d1.next_u64());
        assert_ne!(a, b);
        assert_ne!(b, c);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = SeedRng::new(3);
        let n = 20_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..n {
            let z = rng.normal() as f64;
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn index_is_in_range_and_covers_values() {
        let mut rng = SeedRng::new(11);
        let mut seen = [false; 5];
        for _ in 0..200 {
            let i = rng.index(5);
            assert!(i < 5);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = SeedRng::new(5);
        let p = rng.permutation(17);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..17).collect::<Vec<_>>());
    }
}
