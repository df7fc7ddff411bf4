//! Service configuration, read from TOML.
//!
//! The path comes from `NEEDLE_CONFIG` when set. Relative paths inside the
//! file resolve against the file's directory.

use std::path::{Path, PathBuf};

use needle_core::anomaly::AnomalyConfig;
use needle_core::generation::{RefinementConfig, DEFAULT_GUIDES_PER_GENERATOR, DEFAULT_GUIDE_SIZE};
use needle_core::pipeline::{IndexOptions, SearchConfig};
use needle_core::retrieval::DEFAULT_TILE_MULTIPLIER;
use needle_core::simlab::WorldConfig;
use needle_core::tiling::EdgeParams;
use needle_core::vecstore::{HnswParams, IndexKind};
use needle_core::TilingConfig;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const CONFIG_ENV: &str = "NEEDLE_CONFIG";
/// Endpoint value selecting the in-process mock adapter.
pub const MOCK_ENDPOINT: &str = "mock";
pub const DEFAULT_K: usize = 60;
pub const DEFAULT_SESSION_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderEndpoint {
    pub id: String,
    /// `http://host:port` or `mock`.
    pub endpoint: String,
    /// Required for mocks only when it differs from the mock world; fetched
    /// from `/v1/info` for HTTP adapters when absent.
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEndpoint {
    pub id: String,
    pub endpoint: String,
    /// Empty means any size.
    #[serde(default)]
    pub sizes: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub batch_size: usize,
    /// Unset picks exact or HNSW by corpus size.
    pub kind: Option<IndexKind>,
    pub hnsw: HnswParams,
}

impl Default for IndexSection {
    fn default() -> Self {
        let o = IndexOptions::default();
        Self {
            batch_size: o.batch_size,
            kind: o.index_kind,
            hnsw: o.hnsw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub refinement: RefinementConfig,
    pub guides_per_generator: usize,
    pub guide_size: (u32, u32),
    pub base_seed: u64,
    pub embed_batch: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            refinement: s.refinement,
            guides_per_generator: DEFAULT_GUIDES_PER_GENERATOR,
            guide_size: DEFAULT_GUIDE_SIZE,
            base_seed: s.base_seed,
            embed_batch: s.embed_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub tile_multiplier: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            tile_multiplier: DEFAULT_TILE_MULTIPLIER,
        }
    }
}

/// World behind the `mock` adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSection {
    #[serde(flatten)]
    pub world: WorldConfig,
    pub sigma_gen: f64,
    pub sigma_emb: f64,
}

impl Default for MockSection {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            sigma_gen: 0.05,
            sigma_emb: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub dataset_root: PathBuf,
    /// Dataset searched when a request names none.
    pub default_dataset: String,
    pub trust_path: PathBuf,
    pub default_k: usize,
    pub session_capacity: usize,
    pub adapter_timeout_secs: u64,
    pub embedders: Vec<EmbedderEndpoint>,
    pub generators: Vec<GeneratorEndpoint>,
    pub tiling: TilingConfig,
    pub edges: EdgeParams,
    pub index: IndexSection,
    pub search: SearchSection,
    pub fusion: FusionSection,
    pub anomaly: AnomalyConfig,
    pub mock_world: MockSection,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            dataset_root: PathBuf::from("datasets"),
            default_dataset: "default".into(),
            trust_path: PathBuf::from("trust.json"),
            default_k: DEFAULT_K,
            session_capacity: DEFAULT_SESSION_CAPACITY,
            adapter_timeout_secs: 120,
            embedders: Vec::new(),
            generators: Vec::new(),
            tiling: TilingConfig::default(),
            edges: EdgeParams::default(),
            index: IndexSection::default(),
            search: SearchSection::default(),
            fusion: FusionSection::default(),
            anomaly: AnomalyConfig::default(),
            mock_world: MockSection::default(),
        }
    }
}

impl ServiceConfig {
    /// All-mock configuration with two embedders and one generator.
    pub fn mock(dataset_root: impl Into<PathBuf>, trust_path: impl Into<PathBuf>) -> Self {
        let embedder = |id: &str| EmbedderEndpoint {
            id: id.into(),
            endpoint: MOCK_ENDPOINT.into(),
            dim: None,
        };
        Self {
            dataset_root: dataset_root.into(),
            trust_path: trust_path.into(),
            embedders: vec![embedder("mock-e1"), embedder("mock-e2")],
            generators: vec![GeneratorEndpoint {
                id: "mock-g".into(),
                endpoint: MOCK_ENDPOINT.into(),
                sizes: Vec::new(),
            }],
            ..Default::default()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self, ServiceError> {
        let c: ServiceConfig = toml::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            c.dataset_root = dir.join(&c.dataset_root);
            c.trust_path = dir.join(&c.trust_path);
        }
        Ok(c)
    }

    /// Loads `explicit`, else `$NEEDLE_CONFIG`, else `./needle.toml`.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ServiceError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(CONFIG_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("needle.toml")),
        };
        Self::load(&path)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.embedders.is_empty() {
            return bad("at least one embedder must be configured".into());
        }
        if self.generators.is_empty() {
            return bad("at least one generator must be configured".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self.embedders.iter().map(|e| &e.id).chain(self.generators.iter().map(|g| &g.id)) {
            if id.is_empty() || !seen.insert(id) {
                return bad(format!("adapter ids must be unique and non-empty: {id:?}"));
            }
        }
        for ep in self.embedders.iter().map(|e| &e.endpoint).chain(self.generators.iter().map(|g| &g.endpoint)) {
            if ep != MOCK_ENDPOINT && !ep.starts_with("http://") && !ep.starts_with("https://") {
                return bad(format!("endpoint {ep:?} is neither an http URL nor \"mock\""));
            }
        }
        if self.embedders.iter().any(|e| e.dim == Some(0)) {
            return bad("embedder dim must be positive".into());
        }
        if self.default_k == 0 || self.session_capacity == 0 {
            return bad("default_k and session_capacity must be positive".into());
        }
        self.tiling.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.anomaly.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn index_options(&self) -> IndexOptions {
        IndexOptions {
            tiling: self.tiling,
            edges: self.edges,
            batch_size: self.index.batch_size,
            index_kind: self.index.kind,
            hnsw: self.index.hnsw,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            refinement: self.search.refinement.clone(),
            guides_per_generator: self.search.guides_per_generator,
            guide_size: self.search.guide_size,
            base_seed: self.search.base_seed,
            tile_multiplier: self.fusion.tile_multiplier,
            anomaly: self.anomaly,
            embed_batch: self.search.embed_batch,
        }
    }

    pub fn uses_mocks(&self) -> bool {
        self.embedders.iter().any(|e| e.endpoint == MOCK_ENDPOINT) || self.generators.iter().any(|g| g.endpoint == MOCK_ENDPOINT)
    }
}
