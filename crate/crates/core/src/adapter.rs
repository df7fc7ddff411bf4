//! Adapter traits for external embedders and generators, and the JSON wire
//! protocol they speak.
//!
//! The engine never runs a neural model itself. Embedders and generators are
//! reached through the [`Embedder`] and [`Generator`] traits; the HTTP client
//! implementations live in the service crate, while the deterministic mocks in
//! [`crate::simlab`] implement the traits in-process.
//!
//! Wire format (UTF-8 JSON, floats as decimal):
//!
//! ```text
//! POST /v1/embed     {"embedder_id": s, "images": [{"id": s, "png_b64": s}]}
//!                 -> {"dim": n, "vectors": [{"id": s, "values": [f]}]}
//! POST /v1/generate  {"prompt": s, "count": n, "width": n, "height": n, "seed": n}
//!                 -> {"images": [{"seed": n, "png_b64": s}]}
//! GET  /v1/info   -> {"kind": "embedder", "id": s, "dim": n}
//!                  | {"kind": "generator", "id": s}
//! ```

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedderDescriptor;
use crate::generation::GeneratorDescriptor;

/// 8-bit RGB raster, the only image representation the engine handles.
pub type Raster = RgbImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterErrorKind {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("rejected request: {0}")]
    Rejected(String),
}

/// Failure talking to an adapter, always tagged with the adapter's id.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("adapter {adapter_id}: {kind}")]
pub struct AdapterError {
    pub adapter_id: String,
    pub kind: AdapterErrorKind,
}

impl AdapterError {
    pub fn unreachable(id: &str, msg: impl Into<String>) -> Self {
        Self {
            adapter_id: id.to_owned(),
            kind: AdapterErrorKind::Unreachable(msg.into()),
        }
    }

    pub fn protocol(id: &str, msg: impl Into<String>) -> Self {
        Self {
            adapter_id: id.to_owned(),
            kind: AdapterErrorKind::Protocol(msg.into()),
        }
    }

    pub fn rejected(id: &str, msg: impl Into<String>) -> Self {
        Self {
            adapter_id: id.to_owned(),
            kind: AdapterErrorKind::Rejected(msg.into()),
        }
    }

    pub fn dim_mismatch(id: &str, expected: usize, got: usize) -> Self {
        Self {
            adapter_id: id.to_owned(),
            kind: AdapterErrorKind::DimMismatch { expected, got },
        }
    }
}

/// An image embedder. Returned vectors need not be normalized.
pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> &EmbedderDescriptor;

    fn embed(&self, images: &[&Raster]) -> Result<Vec<Vec<f32>>, AdapterError>;
}

/// A text-to-image generator. Must return exactly `count` images with seeds
/// `seed, seed + 1, ..`, each of the requested size.
pub trait Generator: Send + Sync {
    fn descriptor(&self) -> &GeneratorDescriptor;

    fn generate(
        &self,
        prompt: &str,
        count: usize,
        size: (u32, u32),
        seed: u64,
    ) -> Result<Vec<(u64, Raster)>, AdapterError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub id: String,
    pub png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub embedder_id: String,
    pub images: Vec<ImagePayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorPayload {
    pub id: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<VectorPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub seed: u64,
    pub png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub images: Vec<GeneratedImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Embedder,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub kind: AdapterKind,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

/// Error body shared by the adapters and the service API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("invalid image: {0}")]
    Image(#[from] image::ImageError),
}

/// PNG-encodes a raster. Output bytes are deterministic for a given raster.
pub fn encode_png(raster: &Raster) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    raster
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

pub fn decode_image(bytes: &[u8]) -> Result<Raster, CodecError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn encode_png_b64(raster: &Raster) -> String {
    B64.encode(encode_png(raster))
}

pub fn decode_png_b64(s: &str) -> Result<Raster, CodecError> {
    decode_image(&B64.decode(s)?)
}
