//! SplitMix64 generator with Box-Muller normals.
//!
//! The recipe is fixed so that seeded streams agree bit-for-bit everywhere:
//!
//! * `next_u64`: `state += 0x9E3779B97F4A7C15`, then the SplitMix64 finalizer.
//! * `uniform`: top 53 bits of `next_u64` scaled by 2^-53, in `[0, 1)`.
//! * `normal`: Box-Muller on a pair `(u1, u2)` of uniforms with
//!   `r = sqrt(-2 ln(1 - u1))`; yields `r cos(2 pi u2)` then `r sin(2 pi u2)`.

use std::f64::consts::PI;

use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare: None,
        }
    }

    /// Child generator for parallel or per-purpose streams; the parent is not advanced.
    pub fn derive(&self, index: u64) -> Rng {
        Rng::new(mix(self.state.wrapping_add(GOLDEN_GAMMA) ^ index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Exponential variate with mean 1.
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.standard_normal()).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Standard-normal tensor from a seeded generator.
pub fn rng_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Generated once by an independent Python transcription of the recipe in
    // the module docs (integer arithmetic mod 2^64, math.log/cos/sin).
    const SEED1_U64: [u64; 2] = [0x910a_2dec_8902_5cc1, 0xbeeb_8da1_658e_ec67];
    const SEED1_NORMAL: [f64; 2] = [-0.034_267_321_791_851_144, -1.292_608_533_237_318_5];

    #[test]
    fn golden_u64_stream() {
        let mut rng = Rng::new(1);
        assert_eq!(rng.next_u64(), SEED1_U64[0]);
        assert_eq!(rng.next_u64(), SEED1_U64[1]);
    }

    #[test]
    fn golden_normals() {
        let t = rng_normal(&mut Rng::new(1), &[2]);
        assert_eq!(t.data(), &SEED1_NORMAL);
    }

    #[test]
    fn normal_moments() {
        let t = Rng::new(2024).normal(&[100_000]);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let a = Rng::new(99).normal(&[3, 4]);
        let b = Rng::new(99).normal(&[3, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_differ_early() {
        for seed in 0..64u64 {
            let mut a = Rng::new(seed);
            let mut b = Rng::new(seed + 1);
            let da: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
            let db: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
            assert_ne!(da, db);
        }
    }

    #[test]
    fn derive_does_not_advance_parent() {
        let parent = Rng::new(5);
        let mut c0 = parent.derive(0);
        let mut c1 = parent.derive(1);
        assert_ne!(c0.next_u64(), c1.next_u64());
        let mut p = parent.clone();
        assert_eq!(p.next_u64(), Rng::new(5).next_u64());
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(8);
        for n in 1..50 {
            for _ in 0..20 {
                assert!(rng.below(n) < n);
            }
        }
    }
}
