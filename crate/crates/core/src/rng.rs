//! Seeded, platform-independent random streams.
//!
//! Streams are ChaCha8 keyed by the 64-bit seed; `derive` selects an
//! independent ChaCha stream so that per-epoch and per-sequence draws never
//! depend on how work is scheduled.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(seed, key)`.
    pub fn derive(&self, key: u64) -> RngStream {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(key);
        RngStream { seed: self.seed, inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        // Box-Muller; 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    /// Normal(0, std²) truncated to ±2·std by rejection.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.standard_normal();
            if libm::fabs(z) <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.standard_normal() * std)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
