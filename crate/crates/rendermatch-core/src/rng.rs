//! Seeded, splittable randomness.
//!
//! Every stochastic piece of the pipeline (parameter init, pose noise,
//! dataset generation, shuffling) draws from a [`Rng`] derived from a root
//! seed plus a stream label, so independent streams can be consumed in any
//! order (or on any thread) without changing each other's output.

use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Deterministic RNG used throughout the crate.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

/// splitmix64 finalizer; mixes seed material into stream keys.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Derive an independent stream from `(seed, label, index)`.
    ///
    /// Used to split one root seed into per-sample / per-epoch streams so
    /// parallel generation stays order-independent.
    pub fn stream(seed: u64, label: u64, index: u64) -> Self {
        let a = mix64(seed ^ mix64(label));
        let b = mix64(a ^ mix64(index.wrapping_add(0x51ed_2701)));
        Rng(ChaCha8Rng::seed_from_u64(a ^ b.rotate_left(17)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for n << 2^64 and keeps the stream simple.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (always consumes two uniforms).
    pub fn normal(&mut self) -> f64 {
        use num_traits::Float;
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
    }

    /// Uniform point on the unit sphere.
    pub fn unit_vector(&mut self) -> [f64; 3] {
        use num_traits::Float;
        let z = self.uniform_in(-1.0, 1.0);
        let phi = self.uniform_in(0.0, core::f64::consts::TAU);
        let r = (1.0 - z * z).max(0.0).sqrt();
        [r * phi.cos(), r * phi.sin(), z]
    }

    /// Uniform rotation as a unit quaternion (Shoemake's subgroup method),
    /// returned as (w, x, y, z).
    pub fn unit_quaternion(&mut self) -> [f64; 4] {
        use num_traits::Float;
        let u1 = self.uniform();
        let u2 = self.uniform_in(0.0, core::f64::consts::TAU);
        let u3 = self.uniform_in(0.0, core::f64::consts::TAU);
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        [b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin()]
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// Shuffled index permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = Rng::stream(7, 1, 42);
        let mut b = Rng::stream(7, 1, 42);
        let mut c = Rng::stream(7, 1, 43);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Rng::seed_from(123);
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn quaternions_are_unit_and_cover_both_hemispheres() {
        let mut rng = Rng::seed_from(5);
        let mut neg = 0;
        for _ in 0..1000 {
            let q = rng.unit_quaternion();
            let n2: f64 = q.iter().map(|v| v * v).sum();
            assert!((n2 - 1.0).abs() < 1e-12);
            if q[0] < 0.0 {
                neg += 1;
            }
        }
        assert!(neg > 300 && neg < 700, "w<0 count {neg}");
    }
}
