//! End-to-end retrieval evaluation on a synthetic world with planted targets.
//!
//! Query `q` targets one corpus item and asks for it by the prompt
//! `item <id>`; the target is the only relevant result.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{average_precision, hit_rate, mean};
use super::mock::{MockEmbedder, MockGenerator};
use super::world::{make_world, WorldConfig};
use super::SimError;
use crate::adapter::Embedder;
use crate::generation::{FeedbackMode, QuerySpec, DEFAULT_TOPIC};
use crate::ids::ImageId;
use crate::pipeline::{index_corpus, Engine, IndexOptions, PipelineError, SearchConfig};
use crate::trust::TrustTable;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub world: WorldConfig,
    pub sigma_gen: f64,
    pub sigma_emb: f64,
    pub embedders: usize,
    /// Guides per query.
    pub m: usize,
    pub k: usize,
    pub queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig {
                n_items: 1000,
                n_concepts: 10,
                ..Default::default()
            },
            sigma_gen: 0.05,
            sigma_emb: 0.05,
            embedders: 2,
            m: 4,
            k: 10,
            queries: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query: String,
    pub ap: f64,
    pub hit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: Vec<QueryEval>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mHR")]
    pub mhr: f64,
}

/// Spreads `queries` targets over `n` items so consecutive queries land in
/// different concepts.
pub fn planted_targets(n: usize, queries: usize) -> Vec<ImageId> {
    let stride = (n / queries.max(1)).max(1);
    (0..queries).map(|q| ImageId(((q * stride + q % stride) % n) as u64)).collect()
}

pub fn run_eval(config: &EvalConfig) -> Result<EvalReport, EvalError> {
    if config.embedders == 0 || config.m == 0 || config.k == 0 || config.queries == 0 {
        return Err(SimError::Argument("embedders, m, k and queries must be positive".into()).into());
    }
    let world = make_world(config.world.clone())?;
    let embedders: Vec<Arc<dyn Embedder>> = (0..config.embedders)
        .map(|i| Arc::new(MockEmbedder::for_world(&world, &format!("mock-e{}", i + 1), config.sigma_emb)) as Arc<dyn Embedder>)
        .collect();
    let ids: Vec<ImageId> = world.items.iter().map(|i| i.item_id).collect();
    let w = world.clone();
    let corpus = index_corpus(
        &ids,
        |id| w.item(id).map(|i| w.render(i)).ok_or_else(|| format!("no item {id}")),
        &embedders,
        &IndexOptions::default(),
        &|_| {},
    )?;
    let engine = Engine {
        generators: vec![Arc::new(MockGenerator::new("mock-g", world.clone(), config.sigma_gen))],
        embedders,
        stores: corpus.stores.into_iter().map(Arc::new).collect(),
        config: SearchConfig {
            guides_per_generator: config.m,
            guide_size: super::world::ITEM_RASTER,
            ..Default::default()
        },
    };
    let weights = TrustTable::with_defaults(engine.embedder_ids()).weights(DEFAULT_TOPIC);

    let mut per_query = Vec::with_capacity(config.queries);
    for (q, target) in planted_targets(world.items.len(), config.queries).into_iter().enumerate() {
        let text = format!("item {}", target.0);
        let spec = QuerySpec {
            query_id: format!("q{q}"),
            text: text.clone(),
            topic: DEFAULT_TOPIC.into(),
            k: config.k,
            feedback_mode: FeedbackMode::Off,
        };
        let out = engine.search(&spec, &weights)?;
        let ranked: Vec<ImageId> = out.retrieval.results.iter().map(|r| r.image_id).collect();
        let flags: Vec<bool> = ranked.iter().map(|&id| id == target).collect();
        per_query.push(QueryEval {
            query: text,
            ap: average_precision(&flags, 1)?,
            hit: hit_rate(&ranked, target),
        });
    }
    let aps: Vec<f64> = per_query.iter().map(|q| q.ap).collect();
    let hits: Vec<f64> = per_query.iter().map(|q| q.hit).collect();
    Ok(EvalReport {
        map: mean(&aps).unwrap_or(0.0),
        mhr: mean(&hits).unwrap_or(0.0),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_cover_concepts() {
        let t = planted_targets(1000, 50);
        assert_eq!(t.len(), 50);
        let concepts: std::collections::BTreeSet<u64> = t.iter().map(|id| id.0 % 10).collect();
        assert_eq!(concepts.len(), 10);
    }

    #[test]
    fn small_eval_hits() {
        let cfg = EvalConfig {
            world: WorldConfig { n_items: 100, n_concepts: 5, ..Default::default() },
            queries: 10,
            ..Default::default()
        };
        let r = run_eval(&cfg).unwrap();
        assert_eq!(r.per_query.len(), 10);
        assert!(r.mhr >= 0.9, "{r:?}");
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("mAP").is_some() && json.get("mHR").is_some());
    }
}
