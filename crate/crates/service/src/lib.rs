//! Retrieval service: index jobs, search sessions with an optional guide
//! review gate, feedback-driven trust updates, and the HTTP API over them.
//!
//! [`Service`] holds all state and exposes blocking methods; [`api`] wraps
//! them in axum handlers. The CLI calls the blocking methods directly.

pub mod adapter_http;
pub mod api;
pub mod client;
pub mod config;
pub mod dataset;
mod error;
pub mod jobs;
pub mod session;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use needle_core::pipeline::Engine;
use needle_core::simlab::{make_world, MockEmbedder, MockGenerator, SyntheticWorld};
use needle_core::trust::{partial_loss, FeedbackSet, TopicWeights};
use needle_core::{Embedder, Generator, GuideId, ImageId, QuerySpec, TrustTable};
use serde::{Deserialize, Serialize};

pub use config::ServiceConfig;
pub use error::ServiceError;
pub use jobs::{IndexJobView, JobState};
pub use session::{GuidesView, SessionState, SessionView};

use client::{HttpEmbedder, HttpGenerator};
use config::MOCK_ENDPOINT;
use dataset::DatasetIndex;
use needle_core::generation::{FeedbackMode, DEFAULT_TOPIC};
use session::{Session, SessionStore};

/// Thumbnail cache entries kept before the cache is cleared.
const THUMB_CACHE_LIMIT: usize = 4096;
const REVIEW_REJECTED: &str = "rejected at review";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub text: String,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub feedback_mode: Option<FeedbackMode>,
    /// Defaults to the configured dataset.
    #[serde(default)]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub query_id: String,
    pub topic: String,
    pub losses: BTreeMap<String, f64>,
    pub weights: TopicWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsView {
    pub embedders: Vec<String>,
    pub eta: f64,
    pub floor: f64,
    /// Weights of topics that received feedback.
    pub topics: BTreeMap<String, TopicWeights>,
    /// Weights used for any other topic.
    pub uniform: TopicWeights,
}

pub struct ImageBytes {
    pub content_type: &'static str,
    pub bytes: Arc<Vec<u8>>,
}

/// (dataset, image id, max side).
type ThumbKey = (String, u64, u32);

pub struct Service {
    config: ServiceConfig,
    embedders: Vec<Arc<dyn Embedder>>,
    generators: Vec<Arc<dyn Generator>>,
    world: Option<Arc<SyntheticWorld>>,
    /// Single writer: every trust mutation and save happens under this lock.
    trust: Mutex<TrustTable>,
    datasets: RwLock<HashMap<String, Arc<DatasetIndex>>>,
    sessions: SessionStore,
    jobs: jobs::JobRegistry,
    thumbs: Mutex<HashMap<ThumbKey, Arc<Vec<u8>>>>,
    next_query: AtomicU64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl Service {
    /// Builds adapters from the config: `mock` endpoints become in-process
    /// mocks over the configured world, everything else an HTTP client.
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let world = if config.uses_mocks() {
            Some(make_world(config.mock_world.world.clone()).map_err(|e| ServiceError::Config(e.to_string()))?)
        } else {
            None
        };
        let timeout = Duration::from_secs(config.adapter_timeout_secs);
        let mut embedders: Vec<Arc<dyn Embedder>> = Vec::new();
        for e in &config.embedders {
            if e.endpoint == MOCK_ENDPOINT {
                let w = world.as_ref().expect("world exists when mocks are configured");
                let dim = w.config.latent_dim;
                if e.dim.is_some_and(|d| d != dim) {
                    return Err(ServiceError::Config(format!("mock embedder {} must have dim {dim}", e.id)));
                }
                embedders.push(Arc::new(MockEmbedder::new(&e.id, dim, config.mock_world.sigma_emb)));
            } else {
                embedders.push(Arc::new(HttpEmbedder::connect(&e.id, &e.endpoint, e.dim, timeout)?));
            }
        }
        let generators: Vec<Arc<dyn Generator>> = config
            .generators
            .iter()
            .map(|g| -> Arc<dyn Generator> {
                if g.endpoint == MOCK_ENDPOINT {
                    let w = world.clone().expect("world exists when mocks are configured");
                    Arc::new(MockGenerator::new(&g.id, w, config.mock_world.sigma_gen))
                } else {
                    Arc::new(HttpGenerator::new(&g.id, &g.endpoint, g.sizes.clone(), timeout))
                }
            })
            .collect();
        Self::with_adapters(config, embedders, generators, world)
    }

    /// Uses the given adapters instead of building them from the config.
    pub fn with_adapters(
        config: ServiceConfig,
        embedders: Vec<Arc<dyn Embedder>>,
        generators: Vec<Arc<dyn Generator>>,
        world: Option<Arc<SyntheticWorld>>,
    ) -> Result<Self, ServiceError> {
        if embedders.is_empty() || generators.is_empty() {
            return Err(ServiceError::Config("at least one embedder and one generator are required".into()));
        }
        let ids: Vec<String> = embedders.iter().map(|e| e.descriptor().embedder_id.clone()).collect();
        let mut trust = if config.trust_path.is_file() {
            TrustTable::load(&config.trust_path)?
        } else {
            TrustTable::with_defaults(ids.iter().map(String::as_str))
        };
        trust.sync_embedders(ids.iter().map(String::as_str));
        Ok(Self {
            sessions: SessionStore::new(config.session_capacity),
            config,
            embedders,
            generators,
            world,
            trust: Mutex::new(trust),
            datasets: RwLock::new(HashMap::new()),
            jobs: jobs::JobRegistry::default(),
            thumbs: Mutex::new(HashMap::new()),
            next_query: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn world(&self) -> Option<&Arc<SyntheticWorld>> {
        self.world.as_ref()
    }

    pub fn embedder_ids(&self) -> Vec<String> {
        self.embedders.iter().map(|e| e.descriptor().embedder_id.clone()).collect()
    }

    fn dataset_path(&self, id: &str) -> Result<PathBuf, ServiceError> {
        dataset::dataset_dir(&self.config.dataset_root, id)
    }

    /// Loads (or returns the cached) index of `id`.
    pub fn dataset(&self, id: &str) -> Result<Arc<DatasetIndex>, ServiceError> {
        if let Some(d) = self.datasets.read().expect("dataset lock").get(id) {
            return Ok(d.clone());
        }
        let dir = self.dataset_path(id)?;
        let loaded = Arc::new(dataset::load_index(id, &dir, &self.embedder_ids())?);
        self.datasets
            .write()
            .expect("dataset lock")
            .insert(id.to_owned(), loaded.clone());
        Ok(loaded)
    }

    fn invalidate_dataset(&self, id: &str) {
        self.datasets.write().expect("dataset lock").remove(id);
        self.thumbs.lock().expect("thumb lock").retain(|k, _| k.0 != id);
    }

    // ---- search ----

    fn engine(&self, index: &DatasetIndex) -> Engine {
        Engine {
            generators: self.generators.clone(),
            embedders: self.embedders.clone(),
            stores: index.stores.clone(),
            config: self.config.search_config(),
        }
    }

    /// Validates the request and registers a session in `generating`.
    /// The pipeline runs in [`Service::run_search`].
    pub fn start_search(&self, req: SearchRequest) -> Result<SessionView, ServiceError> {
        if req.text.trim().is_empty() {
            return Err(ServiceError::BadRequest("query text is empty".into()));
        }
        let k = req.k.unwrap_or(self.config.default_k);
        if k == 0 {
            return Err(ServiceError::BadRequest("k must be at least 1".into()));
        }
        let topic = req.topic.filter(|t| !t.trim().is_empty()).unwrap_or_else(|| DEFAULT_TOPIC.to_owned());
        let dataset = req.dataset.unwrap_or_else(|| self.config.default_dataset.clone());
        self.dataset(&dataset)?;
        let n = self.next_query.fetch_add(1, Ordering::Relaxed);
        let spec = QuerySpec {
            query_id: format!("q{n:06}"),
            text: req.text,
            topic,
            k,
            feedback_mode: req.feedback_mode.unwrap_or_default(),
        };
        let session = Session::new(spec, dataset, now_ms());
        let view = session.view();
        self.sessions.insert(session);
        Ok(view)
    }

    /// Generates guides; with feedback off also screens and retrieves.
    /// Failures are recorded on the session.
    pub fn run_search(&self, query_id: &str) -> Result<SessionView, ServiceError> {
        if let Err(e) = self.try_run_search(query_id) {
            self.sessions.with(query_id, |s| s.fail(&e))?;
        }
        self.session(query_id)
    }

    fn try_run_search(&self, query_id: &str) -> Result<(), ServiceError> {
        let (spec, dataset) = self.sessions.with(query_id, |s| (s.spec.clone(), s.dataset.clone()))?;
        let index = self.dataset(&dataset)?;
        let engine = self.engine(&index);
        let mut guides = engine.generate(&spec)?;
        if spec.feedback_mode == FeedbackMode::On {
            return self.sessions.with(query_id, |s| {
                s.set_guides(guides);
                s.advance(SessionState::AwaitingReview)
            })?;
        }
        self.sessions.with(query_id, |s| {
            s.set_guides(guides.clone());
            s.advance(SessionState::Searching)
        })??;
        let weights = self.trust.lock().expect("trust lock").weights(&spec.topic);
        let embedded = engine.embed_guides(&guides)?;
        let (report, survivors) = engine.screen(&mut guides, embedded, &weights)?;
        let retrieval = engine.retrieve(&survivors, &weights, spec.k)?;
        self.sessions.with(query_id, |s| {
            s.guides = guides;
            s.anomaly = Some(report);
            s.ranked = retrieval.ranked;
            s.results = retrieval.results;
            s.release_rasters();
            s.advance(SessionState::Done)
        })?
    }

    /// Start plus run in the calling thread.
    pub fn search(&self, req: SearchRequest) -> Result<SessionView, ServiceError> {
        let view = self.start_search(req)?;
        self.run_search(&view.query_id)
    }

    /// Marks guides outside `keep` as discarded and moves the session to
    /// `searching`. Retrieval runs in [`Service::resume_search`].
    pub fn approve_guides(&self, query_id: &str, keep: &[GuideId]) -> Result<SessionView, ServiceError> {
        if keep.is_empty() {
            return Err(ServiceError::BadRequest("keep at least one guide".into()));
        }
        self.sessions.with(query_id, |s| {
            if s.state != SessionState::AwaitingReview {
                return Err(ServiceError::conflict(
                    "invalid_state",
                    format!("session {query_id} is {:?}, not awaiting review", s.state),
                ));
            }
            let known: BTreeSet<GuideId> = s.guides.iter().map(|g| g.guide_id).collect();
            if let Some(bad) = keep.iter().find(|g| !known.contains(g)) {
                return Err(ServiceError::BadRequest(format!("unknown guide id {bad}")));
            }
            for g in &mut s.guides {
                if !keep.contains(&g.guide_id) {
                    g.discard(REVIEW_REJECTED);
                }
            }
            s.advance(SessionState::Searching)?;
            Ok(s.view())
        })?
    }

    /// Retrieval over the reviewed guides; no anomaly pass.
    pub fn resume_search(&self, query_id: &str) -> Result<SessionView, ServiceError> {
        let run = || -> Result<(), ServiceError> {
            let (spec, dataset, guides) = self.sessions.with(query_id, |s| (s.spec.clone(), s.dataset.clone(), s.guides.clone()))?;
            let index = self.dataset(&dataset)?;
            let weights = self.trust.lock().expect("trust lock").weights(&spec.topic);
            let out = self.engine(&index).search_reviewed(&spec, guides, &weights)?;
            self.sessions.with(query_id, |s| {
                s.ranked = out.retrieval.ranked;
                s.results = out.retrieval.results;
                s.release_rasters();
                s.advance(SessionState::Done)
            })?
        };
        if let Err(e) = run() {
            self.sessions.with(query_id, |s| s.fail(&e))?;
        }
        self.session(query_id)
    }

    pub fn session(&self, query_id: &str) -> Result<SessionView, ServiceError> {
        self.sessions.with(query_id, |s| s.view())
    }

    pub fn guides(&self, query_id: &str) -> Result<GuidesView, ServiceError> {
        self.sessions.with(query_id, |s| s.guides_view())
    }

    // ---- feedback and weights ----

    /// Applies one round of irrelevance feedback to the session's topic.
    /// Each session accepts feedback once.
    pub fn submit_feedback(&self, query_id: &str, irrelevant: &[ImageId]) -> Result<FeedbackOutcome, ServiceError> {
        let irrelevant: BTreeSet<ImageId> = irrelevant.iter().copied().collect();
        let (spec, ranked, returned) = self.sessions.with(query_id, |s| {
            if s.state != SessionState::Done {
                return Err(ServiceError::conflict(
                    "invalid_state",
                    format!("session {query_id} is {:?}; feedback needs a finished search", s.state),
                ));
            }
            if s.feedback_submitted {
                return Err(ServiceError::conflict(
                    "feedback_replayed",
                    format!("feedback for {query_id} was already submitted"),
                ));
            }
            let returned: Vec<ImageId> = s.results.iter().map(|r| r.image_id).collect();
            if let Some(bad) = irrelevant.iter().find(|id| !returned.contains(id)) {
                return Err(ServiceError::BadRequest(format!("image {bad} was not among the results of {query_id}")));
            }
            s.feedback_submitted = true;
            Ok((s.spec.clone(), s.ranked.clone(), returned))
        })??;

        let apply = || -> Result<FeedbackOutcome, ServiceError> {
            let mut trust = self.trust.lock().expect("trust lock");
            if irrelevant.is_empty() {
                return Ok(FeedbackOutcome {
                    query_id: query_id.to_owned(),
                    topic: spec.topic.clone(),
                    losses: BTreeMap::new(),
                    weights: trust.weights(&spec.topic),
                });
            }
            let feedback = FeedbackSet {
                query_id: query_id.to_owned(),
                irrelevant: irrelevant.clone(),
            };
            let losses = partial_loss(&ranked, &feedback, &returned, spec.k)?;
            let mut next = trust.clone();
            next.update_weights(&spec.topic, &losses)?;
            next.save(&self.config.trust_path)?;
            *trust = next;
            Ok(FeedbackOutcome {
                query_id: query_id.to_owned(),
                topic: spec.topic.clone(),
                losses,
                weights: trust.weights(&spec.topic),
            })
        };
        apply().inspect_err(|_| {
            let _ = self.sessions.with(query_id, |s| s.feedback_submitted = false);
        })
    }

    pub fn weights(&self) -> WeightsView {
        let trust = self.trust.lock().expect("trust lock");
        let embedders: Vec<String> = trust.embedders().map(str::to_owned).collect();
        let w = 1.0 / embedders.len().max(1) as f64;
        WeightsView {
            uniform: embedders.iter().map(|e| (e.clone(), w)).collect(),
            embedders,
            eta: trust.eta,
            floor: trust.floor,
            topics: trust.topics.clone(),
        }
    }

    pub fn trust_snapshot(&self) -> TrustTable {
        self.trust.lock().expect("trust lock").clone()
    }

    // ---- images ----

    /// Original bytes of a dataset image, or a PNG thumbnail whose longer
    /// side is at most `size`.
    pub fn image(&self, dataset: Option<&str>, id: ImageId, size: Option<u32>) -> Result<ImageBytes, ServiceError> {
        let dataset = dataset.unwrap_or(&self.config.default_dataset);
        let index = self.dataset(dataset)?;
        let path = index.image_path(id).ok_or_else(|| ServiceError::not_found("image", id))?;
        let Some(size) = size else {
            let content_type = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                Some("png") => "image/png",
                _ => "image/jpeg",
            };
            return Ok(ImageBytes {
                content_type,
                bytes: Arc::new(std::fs::read(&path)?),
            });
        };
        if size == 0 {
            return Err(ServiceError::BadRequest("size must be positive".into()));
        }
        let key = (dataset.to_owned(), id.0, size);
        if let Some(b) = self.thumbs.lock().expect("thumb lock").get(&key) {
            return Ok(ImageBytes {
                content_type: "image/png",
                bytes: b.clone(),
            });
        }
        let raster = needle_core::adapter::decode_image(&std::fs::read(&path)?)
            .map_err(|e| ServiceError::BadRequest(format!("image {id} cannot be decoded: {e}")))?;
        let bytes = Arc::new(session::thumbnail_png(&raster, size));
        let mut cache = self.thumbs.lock().expect("thumb lock");
        if cache.len() >= THUMB_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, bytes.clone());
        Ok(ImageBytes {
            content_type: "image/png",
            bytes,
        })
    }
}
