//! In-process mock adapters over a synthetic world.
//!
//! The embedder reads the latent carried by a raster and adds observation
//! noise; rasters without a readable latent get a pseudo-random direction.
//! The generator resolves a prompt to a latent direction and renders noisy
//! copies of it. Both are deterministic in (input bytes, seed):
//!
//! - embedder noise stream: `SplitMix64(fnv1a(raw RGB bytes) ^ embedder_seed)`
//! - generator noise stream: `SplitMix64(fnv1a(prompt utf-8) ^ image_seed)`
//!
//! Noise is isotropic with per-component standard deviation `sigma / sqrt(dim)`,
//! so `sigma` is the expected noise norm.

use std::sync::Arc;

use super::world::SyntheticWorld;
use super::{codec, fnv1a, normalize_f64, Noise};
use crate::adapter::{AdapterError, Embedder, Generator, Raster};
use crate::embedding::EmbedderDescriptor;
use crate::generation::GeneratorDescriptor;

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    descriptor: EmbedderDescriptor,
    sigma: f64,
    seed: u64,
}

impl MockEmbedder {
    /// Seed defaults to the FNV-1a hash of `id`.
    pub fn new(id: &str, dim: usize, sigma: f64) -> Self {
        Self::with_seed(id, dim, sigma, fnv1a(id.as_bytes()))
    }

    pub fn with_seed(id: &str, dim: usize, sigma: f64, seed: u64) -> Self {
        Self {
            descriptor: EmbedderDescriptor::new(id, dim, "mock:"),
            sigma,
            seed,
        }
    }

    /// Embedder observing `world`'s latent space.
    pub fn for_world(world: &SyntheticWorld, id: &str, sigma: f64) -> Self {
        Self::new(id, world.config.latent_dim, sigma)
    }

    pub fn observe(&self, img: &Raster) -> Vec<f32> {
        let dim = self.descriptor.dim;
        let mut rng = Noise::new(fnv1a(img.as_raw()) ^ self.seed);
        let base: Vec<f64> = match codec::decode_latent(img) {
            Some(v) if v.len() == dim => v.iter().map(|&x| f64::from(x)).collect(),
            _ => normalize_f64(&(0..dim).map(|_| rng.gaussian()).collect::<Vec<_>>()),
        };
        if self.sigma == 0.0 {
            return base.iter().map(|&x| x as f32).collect();
        }
        let noise = rng.isotropic(dim, self.sigma);
        base.iter().zip(&noise).map(|(a, b)| (a + b) as f32).collect()
    }
}

impl Embedder for MockEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed(&self, images: &[&Raster]) -> Result<Vec<Vec<f32>>, AdapterError> {
        Ok(images.iter().map(|img| self.observe(img)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    descriptor: GeneratorDescriptor,
    world: Arc<SyntheticWorld>,
    sigma: f64,
}

impl MockGenerator {
    pub fn new(id: &str, world: Arc<SyntheticWorld>, sigma: f64) -> Self {
        Self {
            descriptor: GeneratorDescriptor::new(id, "mock:"),
            world,
            sigma,
        }
    }

    pub fn world(&self) -> &Arc<SyntheticWorld> {
        &self.world
    }
}

impl Generator for MockGenerator {
    fn descriptor(&self) -> &GeneratorDescriptor {
        &self.descriptor
    }

    fn generate(&self, prompt: &str, count: usize, size: (u32, u32), seed: u64) -> Result<Vec<(u64, Raster)>, AdapterError> {
        let id = &self.descriptor.generator_id;
        let target = self
            .world
            .resolve_prompt(prompt)
            .ok_or_else(|| AdapterError::rejected(id, format!("unknown concept in prompt {prompt:?}")))?;
        if !codec::fits(size, target.len()) {
            return Err(AdapterError::rejected(id, format!("size {size:?} cannot hold the latent")));
        }
        let prompt_hash = fnv1a(prompt.as_bytes());
        Ok((0..count as u64)
            .map(|j| {
                let s = seed.wrapping_add(j);
                let latent = if self.sigma == 0.0 {
                    target.clone()
                } else {
                    let noise = Noise::new(prompt_hash ^ s).isotropic(target.len(), self.sigma);
                    normalize_f64(&target.iter().zip(&noise).map(|(a, b)| a + b).collect::<Vec<_>>())
                };
                let v: Vec<f32> = latent.iter().map(|&x| x as f32).collect();
                (s, codec::encode_latent(&v, size).expect("size checked"))
            })
            .collect())
    }
}
