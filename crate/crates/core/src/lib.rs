//! Retrieval over tiled image corpora driven by generated guide images.
//!
//! A natural-language query is turned into a handful of synthetic "guide"
//! images by one or more generator adapters. Every guide is embedded by every
//! registered embedder, each (guide, embedder) pair runs a k-NN lookup against
//! that embedder's tile store, and the per-pair rankings are fused with
//! topic-conditioned trust weights. User feedback adjusts the trust weights
//! multiplicatively; badly generated guides are rejected with a local outlier
//! factor test before retrieval.
//!
//! Module map:
//!
//! | Module | Responsibility |
//! |--------|----------------|
//! | [`tiling`] | edge-based proxy objects and density-balanced recursive tiling |
//! | [`embedding`] | embedding vectors, cosine geometry, batch embedding |
//! | [`adapter`] | embedder / generator adapter traits and the JSON wire protocol |
//! | [`vecstore`] | exact and HNSW k-NN stores with a binary file format |
//! | [`generation`] | query refinement and guide generation |
//! | [`retrieval`] | per-pair k-NN, rank fusion, the mean-distance estimator |
//! | [`trust`] | per-topic embedder weights and multiplicative updates |
//! | [`anomaly`] | guide rejection via PCA + LOF |
//! | [`simlab`] | synthetic world, mock adapters, concentration harness, metrics |
//! | [`pipeline`] | indexing and search orchestration shared by the service and CLI |

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod anomaly;
pub mod embedding;
pub mod generation;
pub mod ids;
pub mod pipeline;
pub mod retrieval;
pub mod simlab;
pub mod tiling;
pub mod trust;
pub mod vecstore;

pub use adapter::{AdapterError, Embedder, Generator, Raster};
pub use embedding::{cosine_distance, normalize, EmbedderDescriptor, EmbeddingVector};
pub use generation::{GeneratorDescriptor, GuideTuple, QuerySpec, RefinementConfig};
pub use ids::{GuideId, ImageId, TileId};
pub use retrieval::{FusionConfig, RankedList, ScoredImage};
pub use tiling::{Rect, TileSet, TilingConfig};
pub use trust::TrustTable;
pub use vecstore::{IndexKind, KnnResult, StoreManifest, VecStore};
