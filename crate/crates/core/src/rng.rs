//! Seeded random streams shared by the phantom generator, augmentation,
//! weight initialisation and data splitting.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) created
//! with `seed_from_u64(seed)` and positioned with `set_stream(stream)`.
//! Uniform deviates take the top 53 bits of `next_u64` scaled by 2^-53.
//! Normal deviates use the Box-Muller transform on two uniforms
//! `(u1, u2)`: `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, with the matching
//! `sin` value cached and returned by the next call.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in `[lo, hi]`; returns `lo` exactly when the interval is degenerate.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        if hi == lo {
            lo
        } else {
            (lo + (hi - lo) * u).min(hi)
        }
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle driven by [`Self::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
