//! Deterministic random streams.
//!
//! Every random draw in the crate goes through [`Rng`], a thin wrapper over
//! ChaCha8 (`rand_chacha::ChaCha8Rng`). ChaCha output is specified bit-for-bit
//! and does not depend on platform word size or endianness, so a given
//! `(seed, stream)` pair yields the same sequence everywhere.
//!
//! Independent consumers (one per client, plus the fault injector) take
//! separate ChaCha *streams* of the same seed instead of reseeding, so adding
//! a client never perturbs another client's draws.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Name of the generator backing [`Rng`], recorded in run outputs.
pub const ALGORITHM: &str = "chacha8";

/// Stream numbers for each consumer of a seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const PARTITION: u64 = 1 << 40;
    pub const SPLIT: u64 = (1 << 40) + 1;
    pub const FAULTS: u64 = 1 << 41;

    pub fn client(id: u32) -> u64 {
        u64::from(id) + 1
    }

    /// Second stream of client `id`, used by the MoE-decision phase.
    pub fn client_moe(id: u32) -> u64 {
        (1 << 32) + u64::from(id)
    }
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Stream `stream` of `seed`. Streams of one seed never overlap.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Gamma(shape, 1) draw. `shape` must be positive and finite.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
