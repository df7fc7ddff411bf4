//! Per-(guide, embedder) retrieval, weighted rank fusion, and the exact
//! mean-distance estimator.
//!
//! Fusion score of an image:
//!
//! ```text
//! score(I) = sum_i sum_j  w_i[topic] * S(rank(I, R_j^i)),   S(r) = 1/r if r <= k else 0
//! ```
//!
//! where `R_j^i` is the ranked list of guide `j` under embedder `i`. The mean
//! distance estimator averages the cosine distance between every guide
//! embedding and an image's closest tile over all `m * l` (guide, embedder)
//! pairs.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, distance_from_parts, EmbeddingVector};
use crate::ids::{GuideId, ImageId, TileId};
use crate::trust::TopicWeights;
use crate::vecstore::{StoreError, VecStore};

/// Tiles fetched per wanted image before collapsing tiles to images.
pub const DEFAULT_TILE_MULTIPLIER: usize = 4;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no store configured for embedder {0}")]
    MissingStore(String),
    #[error("guide {guide} has no embedding from {embedder}")]
    MissingEmbedding { guide: GuideId, embedder: String },
    #[error("at least one guide is required")]
    NoGuides,
    #[error("at least one embedder is required")]
    NoEmbedders,
    #[error("image {0} is not indexed by every embedder")]
    InconsistentCorpus(ImageId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Cutoff of the position-importance function and size of the output.
    pub k: usize,
    pub tile_multiplier: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 60,
            tile_multiplier: DEFAULT_TILE_MULTIPLIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: ImageId,
    pub best_tile_id: TileId,
    pub distance: f64,
}

/// Top images for one (guide, embedder) pair; rank of `entries[i]` is `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub guide_id: GuideId,
    pub embedder_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// 1-based rank of `image`, if present.
    pub fn rank_of(&self, image: ImageId) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == image).map(|p| p + 1)
    }
}

/// All embeddings of one guide, one per embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideEmbedding {
    pub guide_id: GuideId,
    pub vectors: Vec<EmbeddingVector>,
}

impl GuideEmbedding {
    pub fn for_embedder(&self, embedder_id: &str) -> Option<&EmbeddingVector> {
        self.vectors.iter().find(|v| v.embedder_id() == embedder_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub embedder_id: String,
    pub guide_id: GuideId,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: ImageId,
    pub score: f64,
    pub contributions: Vec<Contribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub image_id: ImageId,
    pub delta_bar: f64,
}

/// `1/rank` inside the top `k`, zero beyond it.
pub fn position_importance(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

fn find_store<'a>(stores: &[&'a VecStore], embedder: &str) -> Option<&'a VecStore> {
    stores.iter().copied().find(|s| s.embedder_id() == embedder)
}

/// Top-`k` images for one guide vector: fetches `multiplier * k` tiles and
/// keeps each image's closest tile, widening the fetch until `k` distinct
/// images are found or the store is exhausted.
pub fn ranked_images(
    store: &VecStore,
    query: &EmbeddingVector,
    k: usize,
    multiplier: usize,
) -> Result<Vec<RankedEntry>, StoreError> {
    let mut fetch = k.saturating_mul(multiplier.max(1)).max(1);
    loop {
        let tiles = store.knn(query, fetch)?;
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(k);
        for t in &tiles {
            if seen.insert(t.image_id) {
                out.push(RankedEntry {
                    image_id: t.image_id,
                    best_tile_id: t.tile_id,
                    distance: t.distance,
                });
                if out.len() == k {
                    break;
                }
            }
        }
        if out.len() == k || tiles.len() < fetch || fetch >= store.len() {
            return Ok(out);
        }
        fetch = fetch.saturating_mul(2).min(store.len());
    }
}

/// One ranked list per (guide, embedder) pair, guide-major in `guides` order
/// and then in `stores` order.
pub fn per_pair_knn(
    guides: &[GuideEmbedding],
    stores: &[&VecStore],
    k: usize,
    tile_multiplier: usize,
) -> Result<Vec<RankedList>, RetrievalError> {
    for g in guides {
        for v in &g.vectors {
            if find_store(stores, v.embedder_id()).is_none() {
                return Err(RetrievalError::MissingStore(v.embedder_id().to_owned()));
            }
        }
    }
    let pairs: Vec<(&GuideEmbedding, &VecStore)> = guides
        .iter()
        .flat_map(|g| stores.iter().map(move |s| (g, *s)))
        .collect();
    pairs
        .par_iter()
        .map(|(g, store)| {
            let query = g
                .for_embedder(store.embedder_id())
                .ok_or_else(|| RetrievalError::MissingEmbedding {
                    guide: g.guide_id,
                    embedder: store.embedder_id().to_owned(),
                })?;
            Ok(RankedList {
                guide_id: g.guide_id,
                embedder_id: store.embedder_id().to_owned(),
                entries: ranked_images(store, query, k, tile_multiplier)?,
            })
        })
        .collect()
}

/// Weighted rank fusion over every ranked list. Returns the top `config.k`
/// images by descending score, ties by ascending image id.
///
/// Lists of embedders absent from `weights` contribute nothing. Per image the
/// weighted terms are summed in ascending order, so images with identical
/// rank profiles always receive bit-identical scores.
pub fn fuse(ranked: &[RankedList], weights: &TopicWeights, config: &FusionConfig) -> Vec<ScoredImage> {
    let mut terms: HashMap<ImageId, (Vec<f64>, Vec<Contribution>)> = HashMap::new();
    for list in ranked {
        let w = weights.get(&list.embedder_id).copied().unwrap_or(0.0);
        for (pos, entry) in list.entries.iter().enumerate() {
            let rank = pos + 1;
            let s = position_importance(rank, config.k);
            if s == 0.0 {
                continue;
            }
            let slot = terms.entry(entry.image_id).or_default();
            slot.0.push(w * s);
            slot.1.push(Contribution {
                embedder_id: list.embedder_id.clone(),
                guide_id: list.guide_id,
                rank,
            });
        }
    }
    let mut scored: Vec<ScoredImage> = terms
        .into_iter()
        .map(|(image_id, (mut t, contributions))| {
            t.sort_by(f64::total_cmp);
            ScoredImage {
                image_id,
                score: t.iter().sum(),
                contributions,
            }
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
    scored.truncate(config.k);
    scored
}

/// Mean cosine distance from each image to the guides, over every
/// (guide, embedder) pair, using the image's closest tile per pair.
///
/// Requires every store to index the same set of images.
pub fn estimate_distance_exact(
    guides: &[GuideEmbedding],
    stores: &[&VecStore],
) -> Result<Vec<DistanceEstimate>, RetrievalError> {
    if guides.is_empty() {
        return Err(RetrievalError::NoGuides);
    }
    if stores.is_empty() {
        return Err(RetrievalError::NoEmbedders);
    }
    let pairs = (guides.len() * stores.len()) as f64;
    // image -> (running sum, pairs seen), summed guide-major then embedder.
    let mut acc: BTreeMap<ImageId, (f64, usize)> = BTreeMap::new();
    for g in guides {
        for store in stores {
            let q = g
                .for_embedder(store.embedder_id())
                .ok_or_else(|| RetrievalError::MissingEmbedding {
                    guide: g.guide_id,
                    embedder: store.embedder_id().to_owned(),
                })?;
            let qv = q.values();
            let qn = dot(qv, qv);
            let mut best: BTreeMap<ImageId, f64> = BTreeMap::new();
            for (_, image, values) in store.entries() {
                let d = distance_from_parts(dot(qv, values), qn, dot(values, values));
                best.entry(image).and_modify(|b| *b = b.min(d)).or_insert(d);
            }
            for (image, d) in best {
                let slot = acc.entry(image).or_insert((0.0, 0));
                slot.0 += d;
                slot.1 += 1;
            }
        }
    }
    let expected = guides.len() * stores.len();
    acc.into_iter()
        .map(|(image_id, (sum, n))| {
            if n != expected {
                return Err(RetrievalError::InconsistentCorpus(image_id));
            }
            Ok(DistanceEstimate {
                image_id,
                delta_bar: sum / pairs,
            })
        })
        .collect()
}

/// The `k` images with the smallest estimated distance, ties by image id.
pub fn topk_exact(estimates: &[DistanceEstimate], k: usize) -> Vec<ImageId> {
    let mut sorted: Vec<&DistanceEstimate> = estimates.iter().collect();
    sorted.sort_by(|a, b| a.delta_bar.total_cmp(&b.delta_bar).then(a.image_id.cmp(&b.image_id)));
    sorted.into_iter().take(k).map(|e| e.image_id).collect()
}
