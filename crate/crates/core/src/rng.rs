//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from ChaCha20 (`rand_chacha`)
//! keyed by a 64-bit seed through `SeedableRng::seed_from_u64`, with a distinct
//! ChaCha stream id per purpose. Two purposes therefore never share variates,
//! even when handed the same seed. Gaussian variates come from
//! `rand_distr::StandardNormal`, so a draw sequence is a pure function of
//! `(seed, purpose)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Named purposes, mapped onto disjoint ChaCha stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Frequencies = 1,
    InitialPositions = 2,
    ControlInit = 3,
    DualInit = 4,
    EvaluationPoints = 5,
}

pub struct GaussianSource {
    rng: ChaCha20Rng,
}

impl GaussianSource {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        Self { rng }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }
}
