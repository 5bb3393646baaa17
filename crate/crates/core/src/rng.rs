//! Counter-based random state.
//!
//! Every consumer of randomness (an initializer, one dropout call, one
//! shuffle) draws a fresh ChaCha stream keyed by `(seed, counter)` and bumps
//! the counter. Two states with equal seed and counter therefore yield
//! bit-identical masks and initializations, and the pair is all a checkpoint
//! needs to store.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Opens the next independent stream.
    pub fn stream(&mut self) -> Stream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        Stream(rng)
    }

    /// A stream that does not advance this state; `salt` selects it.
    pub fn peek_stream(&self, salt: u64) -> Stream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(salt + 1));
        rng.set_stream(self.counter);
        Stream(rng)
    }
}

/// One random stream; draws are in `f64` so both precisions see the same values.
pub struct Stream(ChaCha8Rng);

impl Stream {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.0);
    }
}
