//! Deterministic random number generation.
//!
//! All randomness flows through [`Rng`], a counter-based stream cipher
//! generator: identical `(seed, stream_id)` pairs produce identical
//! sequences on every platform. Independent streams let dataset samples,
//! model initialization, and epoch shuffling draw concurrently without
//! coupling their sequences.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Seedable counter/permutation RNG with explicit stream selection.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    stream_id: u64,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng { inner, stream_id }
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// `n` draws from N(mean, std^2). `std` must be non-negative;
    /// `std == 0` yields `mean` exactly.
    pub fn normal_vec(&mut self, n: usize, mean: f64, std: f64) -> Vec<f64> {
        assert!(std >= 0.0, "std must be non-negative");
        let dist = Normal::new(mean, std).expect("valid normal parameters");
        (0..n).map(|_| dist.sample(&mut self.inner)).collect()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        assert!(std >= 0.0, "std must be non-negative");
        let dist = Normal::new(mean, std).expect("valid normal parameters");
        dist.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        use rand::Rng as _;
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
