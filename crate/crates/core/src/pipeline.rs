//! Indexing and search orchestration shared by the service, the CLI and the
//! synthetic evaluation.
//!
//! Indexing: tile every image, embed every tile (leaves plus the whole image)
//! with every embedder, build one store per embedder.
//!
//! Search: refine the query, generate guides, embed them, drop anomalous
//! guides (or the ones a reviewer rejected), run per-pair k-NN, fuse.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, Embedder, Generator, Raster};
use crate::anomaly::{self, AnomalyConfig, AnomalyError, AnomalyReport};
use crate::embedding::{embed_tiles, DEFAULT_EMBED_BATCH};
use crate::generation::{
    generate_all, refine_query, GenerationError, GuideTuple, QuerySpec, RefinementConfig, DEFAULT_GUIDES_PER_GENERATOR,
    DEFAULT_GUIDE_SIZE,
};
use crate::ids::{GuideId, ImageId, TileId};
use crate::retrieval::{fuse, per_pair_knn, FusionConfig, GuideEmbedding, RankedList, RetrievalError, ScoredImage};
use crate::tiling::{detect_objects, smart_tile, EdgeParams, ManifestTile, Rect, TileManifestEntry, TilingConfig, TilingError};
use crate::trust::TopicWeights;
use crate::vecstore::{HnswParams, IndexEntry, IndexKind, StoreError, StoreManifest, VecStore};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("no surviving guides")]
    NoSurvivingGuides,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{} image(s) failed to index", .0.len())]
    Images(Vec<(ImageId, String)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexOptions {
    pub tiling: TilingConfig,
    pub edges: EdgeParams,
    pub batch_size: usize,
    /// `None` picks by corpus size.
    pub index_kind: Option<IndexKind>,
    pub hnsw: HnswParams,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            tiling: TilingConfig::default(),
            edges: EdgeParams::default(),
            batch_size: DEFAULT_EMBED_BATCH,
            index_kind: None,
            hnsw: HnswParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexEvent {
    ImageTiled { image_id: ImageId, tiles: usize },
    Embedded { embedder_id: String, count: usize },
}

pub struct IndexedCorpus {
    pub manifest: Vec<TileManifestEntry>,
    /// One store per embedder, in embedder order.
    pub stores: Vec<VecStore>,
}

/// Tiles one image. Tile ids start at `first_tile_id`; the whole-image tile
/// comes last unless the image is a single leaf.
pub fn tile_image(
    image_id: ImageId,
    raster: &Raster,
    first_tile_id: u64,
    options: &IndexOptions,
) -> Result<TileManifestEntry, TilingError> {
    options.tiling.validate()?;
    let gray = image::DynamicImage::ImageRgb8(raster.clone()).to_luma8();
    let objects = detect_objects(&gray, &options.edges)?;
    let set = smart_tile(image_id, raster.dimensions(), &objects, &options.tiling);
    let tiles: Vec<ManifestTile> = set
        .distinct_rects()
        .into_iter()
        .enumerate()
        .map(|(i, r)| ManifestTile::new(TileId(first_tile_id + i as u64), r))
        .collect();
    let full_tile_id = tiles.last().expect("at least one tile").tile_id;
    Ok(TileManifestEntry {
        image_id,
        tiles,
        full_tile_id,
    })
}

fn crop(raster: &Raster, r: Rect) -> Raster {
    if (r.x, r.y, r.w, r.h) == (0, 0, raster.width(), raster.height()) {
        return raster.clone();
    }
    image::imageops::crop_imm(raster, r.x, r.y, r.w, r.h).to_image()
}

/// Tiles and embeds a corpus. `load` is called once per image id; any load
/// or tiling failure fails the whole run with the list of bad images.
pub fn index_corpus<F>(
    ids: &[ImageId],
    load: F,
    embedders: &[Arc<dyn Embedder>],
    options: &IndexOptions,
    progress: &(dyn Fn(IndexEvent) + Sync),
) -> Result<IndexedCorpus, PipelineError>
where
    F: Fn(ImageId) -> Result<Raster, String> + Sync,
{
    let tiled: Vec<Result<(Raster, TileManifestEntry), (ImageId, String)>> = ids
        .par_iter()
        .map(|&id| {
            let raster = load(id).map_err(|e| (id, e))?;
            let entry = tile_image(id, &raster, 0, options).map_err(|e| (id, e.to_string()))?;
            progress(IndexEvent::ImageTiled {
                image_id: id,
                tiles: entry.tiles.len(),
            });
            Ok((raster, entry))
        })
        .collect();
    let mut failures = Vec::new();
    let mut images = Vec::with_capacity(tiled.len());
    let mut manifest = Vec::with_capacity(tiled.len());
    let mut next_tile = 0u64;
    for t in tiled {
        match t {
            Ok((raster, mut entry)) => {
                for tile in &mut entry.tiles {
                    tile.tile_id = TileId(tile.tile_id.0 + next_tile);
                }
                entry.full_tile_id = TileId(entry.full_tile_id.0 + next_tile);
                next_tile += entry.tiles.len() as u64;
                images.push(raster);
                manifest.push(entry);
            }
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(PipelineError::Images(failures));
    }

    // (image index, tile) in manifest order
    let jobs: Vec<(usize, &ManifestTile)> = manifest
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.tiles.iter().map(move |t| (i, t)))
        .collect();
    let kind = options.index_kind.unwrap_or_else(|| IndexKind::auto(jobs.len()));
    let batch = options.batch_size.max(1);

    let stores = embedders
        .par_iter()
        .map(|embedder| {
            let desc = embedder.descriptor();
            let mut entries = Vec::with_capacity(jobs.len());
            for chunk in jobs.chunks(batch) {
                let crops: Vec<Raster> = chunk.iter().map(|(i, t)| crop(&images[*i], t.rect())).collect();
                let refs: Vec<&Raster> = crops.iter().collect();
                let vectors = embed_tiles(embedder.as_ref(), &refs, batch)?;
                for ((i, t), vector) in chunk.iter().zip(vectors) {
                    entries.push(IndexEntry {
                        tile_id: t.tile_id,
                        image_id: manifest[*i].image_id,
                        vector,
                    });
                }
                progress(IndexEvent::Embedded {
                    embedder_id: desc.embedder_id.clone(),
                    count: entries.len(),
                });
            }
            let mut m = StoreManifest::new(&desc.embedder_id, desc.dim, kind);
            m.hnsw = options.hnsw;
            Ok(VecStore::build(entries, m)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(IndexedCorpus { manifest, stores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub refinement: RefinementConfig,
    pub guides_per_generator: usize,
    pub guide_size: (u32, u32),
    pub base_seed: u64,
    pub tile_multiplier: usize,
    pub anomaly: AnomalyConfig,
    pub embed_batch: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            refinement: RefinementConfig::default(),
            guides_per_generator: DEFAULT_GUIDES_PER_GENERATOR,
            guide_size: DEFAULT_GUIDE_SIZE,
            base_seed: 0,
            tile_multiplier: FusionConfig::default().tile_multiplier,
            anomaly: AnomalyConfig::default(),
            embed_batch: DEFAULT_EMBED_BATCH,
        }
    }
}

/// Ranked lists and fused results of one retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub ranked: Vec<RankedList>,
    pub results: Vec<ScoredImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub guides: Vec<GuideTuple>,
    pub anomaly: Option<AnomalyReport>,
    pub retrieval: Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub image_id: ImageId,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideRow {
    pub guide_id: GuideId,
    pub discarded: bool,
    pub reason: Option<String>,
}

/// Serialized query result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub results: Vec<ResultRow>,
    pub guides: Vec<GuideRow>,
}

impl QueryResult {
    pub fn new(query_id: &str, results: &[ScoredImage], guides: &[GuideTuple]) -> Self {
        Self {
            query_id: query_id.to_owned(),
            results: results
                .iter()
                .enumerate()
                .map(|(i, s)| ResultRow {
                    image_id: s.image_id,
                    score: s.score,
                    rank: i + 1,
                })
                .collect(),
            guides: guides
                .iter()
                .map(|g| GuideRow {
                    guide_id: g.guide_id,
                    discarded: g.discarded,
                    reason: g.reason.clone(),
                })
                .collect(),
        }
    }
}

/// Adapters and stores for one dataset. Stores are in embedder order.
pub struct Engine {
    pub generators: Vec<Arc<dyn Generator>>,
    pub embedders: Vec<Arc<dyn Embedder>>,
    pub stores: Vec<Arc<VecStore>>,
    pub config: SearchConfig,
}

impl Engine {
    pub fn embedder_ids(&self) -> Vec<String> {
        self.embedders.iter().map(|e| e.descriptor().embedder_id.clone()).collect()
    }

    /// Refines the query text and generates every generator's guides.
    pub fn generate(&self, query: &QuerySpec) -> Result<Vec<GuideTuple>, PipelineError> {
        let prompt = refine_query(&query.text, &self.config.refinement)?;
        let gens: Vec<&dyn Generator> = self.generators.iter().map(|g| g.as_ref()).collect();
        Ok(generate_all(
            &gens,
            &query.query_id,
            &prompt,
            self.config.guides_per_generator,
            self.config.guide_size,
            self.config.base_seed,
        )?)
    }

    /// Embeds the guides not yet discarded with every embedder.
    pub fn embed_guides(&self, guides: &[GuideTuple]) -> Result<Vec<GuideEmbedding>, PipelineError> {
        let live: Vec<&GuideTuple> = guides.iter().filter(|g| !g.discarded).collect();
        let rasters: Vec<&Raster> = live.iter().map(|g| &g.image).collect();
        let per_embedder = self
            .embedders
            .par_iter()
            .map(|e| embed_tiles(e.as_ref(), &rasters, self.config.embed_batch))
            .collect::<Result<Vec<_>, AdapterError>>()?;
        Ok(live
            .iter()
            .enumerate()
            .map(|(j, g)| GuideEmbedding {
                guide_id: g.guide_id,
                vectors: per_embedder.iter().map(|vs| vs[j].clone()).collect(),
            })
            .collect())
    }

    /// Runs the anomaly pass and marks discarded guides. Returns the report
    /// and the embeddings of the survivors.
    pub fn screen(
        &self,
        guides: &mut [GuideTuple],
        embedded: Vec<GuideEmbedding>,
        weights: &TopicWeights,
    ) -> Result<(AnomalyReport, Vec<GuideEmbedding>), PipelineError> {
        let report = anomaly::detect(&embedded, &self.embedder_ids(), weights, &self.config.anomaly)?;
        for ga in report.guides.iter().filter(|g| g.discarded) {
            if let Some(g) = guides.iter_mut().find(|g| g.guide_id == ga.guide_id) {
                g.discard(ga.reason(report.tau));
            }
        }
        let gone = report.discarded();
        let survivors = embedded.into_iter().filter(|e| !gone.contains(&e.guide_id)).collect();
        Ok((report, survivors))
    }

    pub fn retrieve(&self, embedded: &[GuideEmbedding], weights: &TopicWeights, k: usize) -> Result<Retrieval, PipelineError> {
        if k == 0 {
            return Err(PipelineError::ZeroK);
        }
        if embedded.is_empty() {
            return Err(PipelineError::NoSurvivingGuides);
        }
        let stores: Vec<&VecStore> = self.stores.iter().map(|s| s.as_ref()).collect();
        let ranked = per_pair_knn(embedded, &stores, k, self.config.tile_multiplier)?;
        let results = fuse(
            &ranked,
            weights,
            &FusionConfig {
                k,
                tile_multiplier: self.config.tile_multiplier,
            },
        );
        Ok(Retrieval { ranked, results })
    }

    /// Full automatic search: guides are screened by the anomaly pass.
    pub fn search(&self, query: &QuerySpec, weights: &TopicWeights) -> Result<SearchOutcome, PipelineError> {
        let mut guides = self.generate(query)?;
        let embedded = self.embed_guides(&guides)?;
        let (report, survivors) = self.screen(&mut guides, embedded, weights)?;
        let retrieval = self.retrieve(&survivors, weights, query.k)?;
        Ok(SearchOutcome {
            guides,
            anomaly: Some(report),
            retrieval,
        })
    }

    /// Search over guides a reviewer already filtered; no anomaly pass.
    pub fn search_reviewed(&self, query: &QuerySpec, guides: Vec<GuideTuple>, weights: &TopicWeights) -> Result<SearchOutcome, PipelineError> {
        if guides.iter().all(|g| g.discarded) {
            return Err(PipelineError::NoSurvivingGuides);
        }
        let embedded = self.embed_guides(&guides)?;
        let retrieval = self.retrieve(&embedded, weights, query.k)?;
        Ok(SearchOutcome {
            guides,
            anomaly: None,
            retrieval,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::FeedbackMode;
    use crate::simlab::{make_world, MockEmbedder, MockGenerator, WorldConfig};
    use crate::trust::TrustTable;

    fn setup(n_items: usize) -> (Engine, Arc<crate::simlab::SyntheticWorld>) {
        let world = make_world(WorldConfig { n_items, ..Default::default() }).unwrap();
        let embedders: Vec<Arc<dyn Embedder>> = vec![
            Arc::new(MockEmbedder::for_world(&world, "e1", 0.05)),
            Arc::new(MockEmbedder::for_world(&world, "e2", 0.05)),
        ];
        let ids: Vec<ImageId> = world.items.iter().map(|i| i.item_id).collect();
        let w = world.clone();
        let corpus = index_corpus(
            &ids,
            |id| Ok(w.render(w.item(id).unwrap())),
            &embedders,
            &IndexOptions::default(),
            &|_| {},
        )
        .unwrap();
        let engine = Engine {
            generators: vec![Arc::new(MockGenerator::new("g", world.clone(), 0.05))],
            embedders,
            stores: corpus.stores.into_iter().map(Arc::new).collect(),
            config: SearchConfig {
                guides_per_generator: 4,
                guide_size: (64, 64),
                ..Default::default()
            },
        };
        (engine, world)
    }

    fn query(text: &str, k: usize) -> QuerySpec {
        QuerySpec {
            query_id: "q".into(),
            text: text.into(),
            topic: "general".into(),
            k,
            feedback_mode: FeedbackMode::Off,
        }
    }

    #[test]
    fn index_counts_and_manifest() {
        let (engine, _) = setup(30);
        assert_eq!(engine.stores.len(), 2);
        assert!(engine.stores.iter().all(|s| s.len() == 30));
    }

    #[test]
    fn empty_corpus_indexes_to_empty_stores() {
        let world = make_world(WorldConfig { n_items: 1, ..Default::default() }).unwrap();
        let e: Vec<Arc<dyn Embedder>> = vec![Arc::new(MockEmbedder::for_world(&world, "e", 0.0))];
        let c = index_corpus(&[], |_| Err("none".into()), &e, &IndexOptions::default(), &|_| {}).unwrap();
        assert!(c.manifest.is_empty() && c.stores[0].is_empty());
        let bad = index_corpus(&[ImageId(3)], |_| Err("gone".into()), &e, &IndexOptions::default(), &|_| {});
        assert!(matches!(bad, Err(PipelineError::Images(v)) if v == vec![(ImageId(3), "gone".to_string())]));
    }

    #[test]
    fn tiling_a_large_busy_image_splits_it() {
        let mut img = Raster::from_pixel(512, 512, image::Rgb([255, 255, 255]));
        for i in 0..12u32 {
            let (x, y) = ((i % 4) * 120 + 10, (i / 4) * 160 + 10);
            for dx in 0..40 {
                for dy in 0..40 {
                    img.put_pixel(x + dx, y + dy, image::Rgb([0, 0, 0]));
                }
            }
        }
        let e = tile_image(ImageId(0), &img, 100, &IndexOptions::default()).unwrap();
        assert!(e.tiles.len() > 2);
        assert_eq!(e.tiles[0].tile_id, TileId(100));
        let full = e.tiles.last().unwrap();
        assert_eq!((full.tile_id, full.w, full.h), (e.full_tile_id, 512, 512));
    }

    #[test]
    fn concept_query_returns_k_results_of_that_concept() {
        let (engine, world) = setup(200);
        let weights = TrustTable::with_defaults(engine.embedder_ids()).weights("general");
        let out = engine.search(&query("a photo of a guitar", 10), &weights).unwrap();
        assert_eq!(out.retrieval.results.len(), 10);
        let concept = world.concept_by_name("guitar").unwrap().concept_id;
        for r in &out.retrieval.results {
            assert_eq!(world.item(r.image_id).unwrap().concept_id, concept);
        }
        assert!(out.guides.iter().filter(|g| !g.discarded).count() >= 1);
        let json = serde_json::to_value(QueryResult::new("q", &out.retrieval.results, &out.guides)).unwrap();
        assert_eq!(json["results"][0]["rank"], 1);
    }

    #[test]
    fn reviewed_search_requires_a_survivor() {
        let (engine, _) = setup(20);
        let weights = TrustTable::with_defaults(engine.embedder_ids()).weights("general");
        let mut guides = engine.generate(&query("harbor", 5)).unwrap();
        for g in &mut guides {
            g.discard("rejected");
        }
        assert!(matches!(
            engine.search_reviewed(&query("harbor", 5), guides, &weights),
            Err(PipelineError::NoSurvivingGuides)
        ));
    }

    #[test]
    fn keep_all_review_equals_unscreened_search() {
        let (mut engine, _) = setup(50);
        let weights = TrustTable::with_defaults(engine.embedder_ids()).weights("general");
        let guides = engine.generate(&query("igloo", 8)).unwrap();
        let reviewed = engine.search_reviewed(&query("igloo", 8), guides, &weights).unwrap();
        engine.config.anomaly.enabled = false;
        let auto = engine.search(&query("igloo", 8), &weights).unwrap();
        assert_eq!(reviewed.retrieval, auto.retrieval);
    }
}
