//! Synthetic semantic world, deterministic mock adapters, the concentration
//! harness, and retrieval metrics.
//!
//! The world gives every corpus item a latent unit vector near its concept's
//! vector. Rasters carry their latent in-band (see [`codec`]), so the mock
//! embedder can read it back and the generate -> embed loop closes without any
//! model. Noise in the mocks is drawn from SplitMix64 with Box-Muller normals
//! so that other implementations of the mock protocol can reproduce it.

pub mod codec;
pub mod concentration;
pub mod eval;
pub mod metrics;
pub mod mock;
pub mod world;

use rand::RngCore;
use rand_xoshiro::SplitMix64;
use thiserror::Error;

pub use concentration::{chernoff_bound, concentration_trial, BernoulliSampler, ConcentrationReport, DistanceSampler};
pub use eval::{run_eval, EvalConfig, EvalReport, QueryEval};
pub use metrics::{average_precision, hit_rate, mean};
pub use mock::{MockEmbedder, MockGenerator};
pub use world::{make_world, Concept, Item, SyntheticWorld, WorldConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{0} trials is too few, at least {min} are required", min = concentration::MIN_TRIALS)]
    StatisticalPower(usize),
    #[error("relevant count {r} is smaller than the {found} relevant results given")]
    Relevance { r: usize, found: usize },
}

/// Portable noise source: SplitMix64 seeded with `seed` directly.
pub(crate) struct Noise(SplitMix64);

impl Noise {
    pub(crate) fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self(SplitMix64::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub(crate) fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the cosine branch of Box-Muller.
    pub(crate) fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Isotropic noise whose expected squared norm is `sigma^2`.
    pub(crate) fn isotropic(&mut self, dim: usize, sigma: f64) -> Vec<f64> {
        let s = sigma / (dim as f64).sqrt();
        (0..dim).map(|_| s * self.gaussian()).collect()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub(crate) fn normalize_f64(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}
