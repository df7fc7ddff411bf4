//! Per-embedder tile index with exact and HNSW k-NN.
//!
//! A [`VecStore`] is immutable once built. Vectors are held in one flat
//! `f32` buffer together with their squared norms, so a distance costs one
//! dot product. Results are always ordered by ascending cosine distance with
//! ties broken by ascending tile id.

mod file;
mod hnsw;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{distance_from_parts, dot, EmbeddingVector};
use crate::ids::{ImageId, TileId};

pub use file::{manifest_path, FORMAT_VERSION, MAGIC};
pub(crate) use file::write_atomic;
pub use hnsw::HnswParams;

/// Stores at or above this size default to the HNSW index.
pub const AUTO_HNSW_THRESHOLD: usize = 50_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate tile id {0}")]
    DuplicateTile(TileId),
    #[error("dimension mismatch: store has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedder mismatch: store is {expected}, got {got}")]
    EmbedderMismatch { expected: String, got: String },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("store file format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    #[default]
    Exact,
    Hnsw,
}

impl IndexKind {
    pub fn auto(count: usize) -> Self {
        if count >= AUTO_HNSW_THRESHOLD {
            IndexKind::Hnsw
        } else {
            IndexKind::Exact
        }
    }
}

/// Sidecar metadata of a store; persisted as JSON next to the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub embedder_id: String,
    pub dim: usize,
    pub count: usize,
    pub index_kind: IndexKind,
    #[serde(default)]
    pub hnsw: HnswParams,
}

impl StoreManifest {
    pub fn new(embedder_id: impl Into<String>, dim: usize, index_kind: IndexKind) -> Self {
        Self {
            embedder_id: embedder_id.into(),
            dim,
            count: 0,
            index_kind,
            hnsw: HnswParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub tile_id: TileId,
    pub image_id: ImageId,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub tile_id: TileId,
    pub image_id: ImageId,
    pub distance: f64,
}

pub(crate) fn result_order(a: &KnnResult, b: &KnnResult) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.tile_id.cmp(&b.tile_id))
}

#[derive(Debug)]
pub struct VecStore {
    manifest: StoreManifest,
    embedder_id: Arc<str>,
    tile_ids: Vec<TileId>,
    image_ids: Vec<ImageId>,
    data: Vec<f32>,
    sq_norms: Vec<f64>,
    graph: Option<hnsw::HnswGraph>,
}

impl VecStore {
    /// Builds a store; `manifest.count` is overwritten with the entry count.
    pub fn build(entries: Vec<IndexEntry>, mut manifest: StoreManifest) -> Result<Self, StoreError> {
        let mut seen = HashSet::with_capacity(entries.len());
        let mut tile_ids = Vec::with_capacity(entries.len());
        let mut image_ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * manifest.dim);
        for e in entries {
            if e.vector.embedder_id() != manifest.embedder_id {
                return Err(StoreError::EmbedderMismatch {
                    expected: manifest.embedder_id.clone(),
                    got: e.vector.embedder_id().to_owned(),
                });
            }
            if e.vector.dim() != manifest.dim {
                return Err(StoreError::DimMismatch {
                    expected: manifest.dim,
                    got: e.vector.dim(),
                });
            }
            if !seen.insert(e.tile_id) {
                return Err(StoreError::DuplicateTile(e.tile_id));
            }
            tile_ids.push(e.tile_id);
            image_ids.push(e.image_id);
            data.extend_from_slice(e.vector.values());
        }
        manifest.count = tile_ids.len();
        Ok(Self::from_parts(manifest, tile_ids, image_ids, data))
    }

    fn from_parts(manifest: StoreManifest, tile_ids: Vec<TileId>, image_ids: Vec<ImageId>, data: Vec<f32>) -> Self {
        let dim = manifest.dim;
        let sq_norms = if dim == 0 {
            vec![0.0; tile_ids.len()]
        } else {
            data.chunks_exact(dim).map(|v| dot(v, v)).collect()
        };
        let mut store = Self {
            embedder_id: Arc::from(manifest.embedder_id.as_str()),
            manifest,
            tile_ids,
            image_ids,
            data,
            sq_norms,
            graph: None,
        };
        if store.manifest.index_kind == IndexKind::Hnsw && !store.is_empty() {
            store.graph = Some(hnsw::HnswGraph::build(&store, store.manifest.hnsw));
        }
        store
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tile_ids.is_empty()
    }

    pub fn tile_id(&self, idx: usize) -> TileId {
        self.tile_ids[idx]
    }

    pub fn image_id(&self, idx: usize) -> ImageId {
        self.image_ids[idx]
    }

    pub fn vector(&self, idx: usize) -> &[f32] {
        let d = self.manifest.dim;
        &self.data[idx * d..(idx + 1) * d]
    }

    /// Iterates `(tile_id, image_id, values)` in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (TileId, ImageId, &[f32])> + '_ {
        (0..self.len()).map(move |i| (self.tile_ids[i], self.image_ids[i], self.vector(i)))
    }

    #[inline]
    pub(crate) fn distance_to(&self, query: &[f32], query_sq_norm: f64, idx: usize) -> f64 {
        distance_from_parts(dot(query, self.vector(idx)), query_sq_norm, self.sq_norms[idx])
    }

    #[inline]
    pub(crate) fn distance_between(&self, a: usize, b: usize) -> f64 {
        distance_from_parts(dot(self.vector(a), self.vector(b)), self.sq_norms[a], self.sq_norms[b])
    }

    fn check_query(&self, query: &EmbeddingVector, k: usize) -> Result<(), StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        if query.dim() != self.manifest.dim {
            return Err(StoreError::DimMismatch {
                expected: self.manifest.dim,
                got: query.dim(),
            });
        }
        if query.embedder_id() != self.manifest.embedder_id {
            return Err(StoreError::EmbedderMismatch {
                expected: self.manifest.embedder_id.clone(),
                got: query.embedder_id().to_owned(),
            });
        }
        Ok(())
    }

    /// k nearest tiles to `query`, using the store's index kind.
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<KnnResult>, StoreError> {
        self.check_query(query, k)?;
        match &self.graph {
            Some(g) => Ok(g.search(self, query.values(), k, self.manifest.hnsw.ef_search)),
            None => Ok(self.scan(query.values(), k)),
        }
    }

    /// Exact k-NN by full scan, regardless of the index kind.
    pub fn knn_exact(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<KnnResult>, StoreError> {
        self.check_query(query, k)?;
        Ok(self.scan(query.values(), k))
    }

    fn scan(&self, query: &[f32], k: usize) -> Vec<KnnResult> {
        let qn = dot(query, query);
        let mut all: Vec<KnnResult> = (0..self.len())
            .map(|i| KnnResult {
                tile_id: self.tile_ids[i],
                image_id: self.image_ids[i],
                distance: self.distance_to(query, qn, i),
            })
            .collect();
        if all.len() > k {
            all.select_nth_unstable_by(k - 1, result_order);
            all.truncate(k);
        }
        all.sort_unstable_by(result_order);
        all
    }
}
