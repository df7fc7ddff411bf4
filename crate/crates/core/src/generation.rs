//! Query refinement and guide generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, Generator, Raster};
use crate::ids::GuideId;

/// Guide resolution used unless configured otherwise.
pub const DEFAULT_GUIDE_SIZE: (u32, u32) = (768, 768);
/// Guides requested from each generator per query.
pub const DEFAULT_GUIDES_PER_GENERATOR: usize = 2;
pub const DEFAULT_TOPIC: &str = "general";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("query is empty after refinement")]
    EmptyPrompt,
    #[error("guide count must be at least 1")]
    ZeroGuides,
    #[error("generator {generator_id} does not support size {w}x{h}")]
    UnsupportedSize { generator_id: String, w: u32, h: u32 },
    #[error("generation failed: {0}")]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    On,
    #[default]
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub text: String,
    #[serde(default = "default_topic")]
    pub topic: String,
    pub k: usize,
    #[serde(default)]
    pub feedback_mode: FeedbackMode,
}

fn default_topic() -> String {
    DEFAULT_TOPIC.to_owned()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub prefix: String,
    pub suffix: String,
    pub strip_punctuation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDescriptor {
    pub generator_id: String,
    pub endpoint: String,
    /// Accepted `(width, height)` pairs; empty means any size.
    #[serde(default)]
    pub supported_sizes: Vec<(u32, u32)>,
}

impl GeneratorDescriptor {
    pub fn new(generator_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            generator_id: generator_id.into(),
            endpoint: endpoint.into(),
            supported_sizes: Vec::new(),
        }
    }

    pub fn supports(&self, size: (u32, u32)) -> bool {
        self.supported_sizes.is_empty() || self.supported_sizes.contains(&size)
    }
}

/// One generated guide image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideTuple {
    pub guide_id: GuideId,
    pub query_id: String,
    pub generator_id: String,
    pub seed: u64,
    pub image: Raster,
    pub prompt_used: String,
    pub discarded: bool,
    pub reason: Option<String>,
}

impl GuideTuple {
    pub fn discard(&mut self, reason: impl Into<String>) {
        self.discarded = true;
        self.reason = Some(reason.into());
    }
}

/// Builds the generator prompt: optionally strips punctuation, collapses
/// whitespace, then wraps the core text in the configured prefix and suffix.
pub fn refine_query(text: &str, config: &RefinementConfig) -> Result<String, GenerationError> {
    let core: String = if config.strip_punctuation {
        text.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect()
    } else {
        text.to_owned()
    };
    let prompt = [config.prefix.as_str(), core.as_str(), config.suffix.as_str()]
        .iter()
        .flat_map(|s| s.split_whitespace())
        .collect::<Vec<_>>()
        .join(" ");
    if core.split_whitespace().next().is_none() || prompt.is_empty() {
        return Err(GenerationError::EmptyPrompt);
    }
    Ok(prompt)
}

/// Asks `generator` for `m` guides with seeds `base_seed..base_seed + m`.
/// Guide ids start at `first_id`.
pub fn generate_guides(
    generator: &dyn Generator,
    query_id: &str,
    prompt: &str,
    m: usize,
    size: (u32, u32),
    base_seed: u64,
    first_id: u32,
) -> Result<Vec<GuideTuple>, GenerationError> {
    if m == 0 {
        return Err(GenerationError::ZeroGuides);
    }
    let desc = generator.descriptor();
    if !desc.supports(size) {
        return Err(GenerationError::UnsupportedSize {
            generator_id: desc.generator_id.clone(),
            w: size.0,
            h: size.1,
        });
    }
    let images = generator.generate(prompt, m, size, base_seed)?;
    if images.len() != m {
        return Err(AdapterError::protocol(
            &desc.generator_id,
            format!("requested {m} images, got {}", images.len()),
        )
        .into());
    }
    images
        .into_iter()
        .enumerate()
        .map(|(j, (seed, image))| {
            let expected = base_seed.wrapping_add(j as u64);
            if seed != expected {
                return Err(AdapterError::protocol(
                    &desc.generator_id,
                    format!("image {j} has seed {seed}, expected {expected}"),
                )
                .into());
            }
            if image.dimensions() != size {
                return Err(AdapterError::protocol(
                    &desc.generator_id,
                    format!("image {j} is {:?}, requested {size:?}", image.dimensions()),
                )
                .into());
            }
            Ok(GuideTuple {
                guide_id: GuideId(first_id + j as u32),
                query_id: query_id.to_owned(),
                generator_id: desc.generator_id.clone(),
                seed,
                image,
                prompt_used: prompt.to_owned(),
                discarded: false,
                reason: None,
            })
        })
        .collect()
}

/// Generates `per_generator` guides from every generator, in registry order
/// then seed order, with consecutive guide ids.
pub fn generate_all(
    generators: &[&dyn Generator],
    query_id: &str,
    prompt: &str,
    per_generator: usize,
    size: (u32, u32),
    base_seed: u64,
) -> Result<Vec<GuideTuple>, GenerationError> {
    use rayon::prelude::*;
    let batches: Vec<Result<Vec<GuideTuple>, GenerationError>> = generators
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let first = (i * per_generator) as u32;
            generate_guides(*g, query_id, prompt, per_generator, size, base_seed, first)
        })
        .collect();
    let mut out = Vec::with_capacity(generators.len() * per_generator);
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}
