//! Seeded random streams. Every random draw in the crate goes through
//! ChaCha8 so results are identical across platforms and runs.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Seeded ChaCha8 generator.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_inclusive(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Gaussian stream with fixed standard deviation.
pub struct Gaussian {
    rng: SeededRng,
    dist: Normal<f64>,
}

impl Gaussian {
    pub fn new(seed: u64, std: f64) -> Self {
        Self::from_rng(seeded(seed), std)
    }

    pub fn from_rng(rng: SeededRng, std: f64) -> Self {
        Self {
            rng,
            dist: Normal::new(0.0, std).expect("standard deviation must be finite and positive"),
        }
    }

    pub fn sample(&mut self) -> f64 {
        self.dist.sample(&mut self.rng)
    }

    pub fn vector(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.sample()).collect()
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }
}
