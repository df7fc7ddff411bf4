//! Embedding vectors and cosine geometry.
//!
//! Vectors are normalized on ingestion and stored as `f32`; every dot product
//! accumulates in `f64`. On unit vectors the cosine distance `1 - cos(u, v)`
//! orders results exactly like descending inner product, which is what lets
//! the vector store behave as a maximum-inner-product index.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, Embedder, Raster};

/// Allowed deviation of a stored vector's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("non-finite component in vector")]
    NonFinite,
    #[error("vector is not unit-normalized (norm {0})")]
    NotUnit(f64),
    #[error("embedder mismatch: {left} vs {right}")]
    EmbedderMismatch { left: String, right: String },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

/// Registry entry for one embedder. `dim` is fixed for the embedder's lifetime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub embedder_id: String,
    pub dim: usize,
    pub endpoint: String,
    #[serde(default)]
    pub version: String,
}

impl EmbedderDescriptor {
    pub fn new(embedder_id: impl Into<String>, dim: usize, endpoint: impl Into<String>) -> Self {
        Self {
            embedder_id: embedder_id.into(),
            dim,
            endpoint: endpoint.into(),
            version: String::new(),
        }
    }
}

/// A unit-norm vector tagged with the embedder that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    embedder_id: Arc<str>,
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Normalizes `values` and tags them with `embedder_id`.
    pub fn new(embedder_id: impl Into<Arc<str>>, values: &[f32]) -> Result<Self, EmbeddingError> {
        Ok(Self {
            embedder_id: embedder_id.into(),
            values: normalize(values)?,
        })
    }

    /// Wraps values that are already unit-normalized, checking the norm.
    pub fn from_unit(embedder_id: impl Into<Arc<str>>, values: Vec<f32>) -> Result<Self, EmbeddingError> {
        let norm = l2_norm(&values);
        if !norm.is_finite() {
            return Err(EmbeddingError::NonFinite);
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnit(norm));
        }
        Ok(Self {
            embedder_id: embedder_id.into(),
            values,
        })
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn shared_embedder_id(&self) -> &Arc<str> {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine distance from a precomputed dot product and squared norms.
///
/// Dividing by `sqrt(nu * nv)` instead of assuming unit norms keeps
/// `distance(u, u)` at exactly zero despite `f32` storage rounding.
#[inline]
pub(crate) fn distance_from_parts(dot: f64, sq_norm_u: f64, sq_norm_v: f64) -> f64 {
    let denom = (sq_norm_u * sq_norm_v).sqrt();
    if denom == 0.0 {
        return 1.0;
    }
    (1.0 - dot / denom).clamp(0.0, 2.0)
}

#[inline]
pub(crate) fn raw_cosine_distance(u: &[f32], v: &[f32]) -> f64 {
    distance_from_parts(dot(u, v), dot(u, u), dot(v, v))
}

/// `1 - <u, v>` for two unit vectors from the same embedder, in `[0, 2]`.
pub fn cosine_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if u.embedder_id != v.embedder_id {
        return Err(EmbeddingError::EmbedderMismatch {
            left: u.embedder_id.to_string(),
            right: v.embedder_id.to_string(),
        });
    }
    if u.dim() != v.dim() {
        return Err(EmbeddingError::DimMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    Ok(raw_cosine_distance(&u.values, &v.values))
}

/// Scales `values` to unit L2 norm (computed in `f64`).
pub fn normalize(values: &[f32]) -> Result<Vec<f32>, EmbeddingError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    let norm = l2_norm(values);
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok(values.iter().map(|&v| (v as f64 / norm) as f32).collect())
}

/// Default number of images per adapter call.
pub const DEFAULT_EMBED_BATCH: usize = 16;

/// Embeds `images` with `embedder`, one vector per image in input order.
///
/// Batching is invisible to the caller: every returned vector is checked
/// against the descriptor's dimension and normalized on receipt.
pub fn embed_tiles(
    embedder: &dyn Embedder,
    images: &[&Raster],
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, AdapterError> {
    let descriptor = embedder.descriptor();
    let id: Arc<str> = Arc::from(descriptor.embedder_id.as_str());
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let raw = embedder.embed(chunk)?;
        if raw.len() != chunk.len() {
            return Err(AdapterError::protocol(
                &descriptor.embedder_id,
                format!("expected {} vectors, got {}", chunk.len(), raw.len()),
            ));
        }
        for values in raw {
            if values.len() != descriptor.dim {
                return Err(AdapterError::dim_mismatch(
                    &descriptor.embedder_id,
                    descriptor.dim,
                    values.len(),
                ));
            }
            let v = EmbeddingVector::new(id.clone(), &values).map_err(|e| {
                AdapterError::protocol(&descriptor.embedder_id, format!("bad vector: {e}"))
            })?;
            out.push(v);
        }
    }
    Ok(out)
}
