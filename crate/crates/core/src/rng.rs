//! Counter-based pseudo-random generator.
//!
//! Every draw is `mix(key, counter)` for a SplitMix64-style finalizer, so a
//! stream is fully determined by its key and position: replaying a seed
//! replays the exact draws, and independent substreams are derived by
//! re-keying rather than by sharing mutable state.

use crate::math;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seedable counter-based RNG stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    /// Derive an independent substream; streams with distinct tags never
    /// collide with each other or with the parent.
    pub fn derive(&self, tag: u64) -> Self {
        CounterRng {
            key: mix(self.key ^ mix(tag.wrapping_mul(GOLDEN).wrapping_add(1))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform on [0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller on two uniforms.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * math::PI * u2)
    }

    /// Standard Laplace draw (location 0, scale 1) via inverse CDF.
    pub fn laplace(&mut self) -> f64 {
        let u = self.uniform() - 0.5;
        let a = 1.0 - 2.0 * math::abs(u);
        // a is in (0, 1]; ln is finite.
        -math::ln(a.max(f64::MIN_POSITIVE)) * if u < 0.0 { -1.0 } else { 1.0 }
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_same_stream() {
        let mut a = CounterRng::new(42);
        let mut b = CounterRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let root = CounterRng::new(7);
        let mut a = root.derive(0);
        let mut b = root.derive(1);
        let hits = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn normal_moments() {
        let mut rng = CounterRng::new(123);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn laplace_moments() {
        let mut rng = CounterRng::new(321);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.laplace()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        // Var of standard Laplace is 2.
        assert!((var - 2.0).abs() < 0.08, "var {var}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = CounterRng::new(5);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
