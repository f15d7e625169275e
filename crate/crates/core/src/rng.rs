//! Counter-based seeded random streams.
//!
//! Every stochastic operation in the crate draws from a `(seed, stream)`
//! pair, so independent positions / samples / workers can be given disjoint
//! streams and replayed deterministically in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// A deterministic random stream addressed by `(seed, stream)`.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng }
    }

    /// Uniform draw in [0, 1).
    pub fn uniform<F: Scalar>(&mut self) -> F {
        F::c(self.rng.random::<f64>())
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_range<F: Scalar>(&mut self, lo: F, hi: F) -> F {
        lo + (hi - lo) * self.uniform::<F>()
    }

    /// Standard normal via Box-Muller.
    pub fn normal<F: Scalar>(&mut self) -> F {
        let u1: f64 = self.rng.random::<f64>().max(1e-300);
        let u2: f64 = self.rng.random();
        F::c((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Index drawn from an unnormalized weight vector.
    pub fn categorical<F: Scalar>(&mut self, weights: &[F]) -> usize {
        let total: F = weights.iter().copied().sum();
        let mut dart = self.uniform::<F>() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart = dart - w;
            if dart < F::zero() {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}
