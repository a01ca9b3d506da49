use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Seeded ChaCha20 stream. Identical seeds (and stream ids) give identical draws.
///
/// Training loops never carry one generator across steps; they call
/// [`SeededRng::derive`] with the step index so that a run resumed from a
/// checkpoint replays exactly the same randomness.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream `stream` of `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }
}

/// Matrix of i.i.d. `N(mu, sigma²)` entries drawn in row-major order.
///
/// `sigma == 0` returns exactly `mu` everywhere without consuming the stream.
pub fn gaussian_sample(rng: &mut SeededRng, rows: usize, cols: usize, mu: f64, sigma: f64) -> Matrix {
    assert!(sigma >= 0.0, "gaussian_sample: sigma must be non-negative");
    if sigma == 0.0 {
        return Matrix::filled(rows, cols, mu);
    }
    let data = (0..rows * cols).map(|_| mu + sigma * rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}
