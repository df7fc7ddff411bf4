//! Indexing and search through the public API on a synthetic world.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use needle_core::generation::{FeedbackMode, DEFAULT_TOPIC};
use needle_core::pipeline::{index_corpus, Engine, IndexOptions, SearchConfig};
use needle_core::simlab::{make_world, MockEmbedder, MockGenerator, SyntheticWorld, WorldConfig};
use needle_core::trust::{partial_loss, FeedbackSet};
use needle_core::{Embedder, ImageId, IndexKind, QuerySpec, TrustTable, VecStore};

fn world(n: usize) -> Arc<SyntheticWorld> {
    make_world(WorldConfig {
        n_items: n,
        n_concepts: 5,
        ..Default::default()
    })
    .unwrap()
}

fn engine(world: &Arc<SyntheticWorld>, kind: IndexKind) -> Engine {
    let embedders: Vec<Arc<dyn Embedder>> = ["mock-e1", "mock-e2"]
        .iter()
        .map(|id| Arc::new(MockEmbedder::for_world(world, id, 0.05)) as Arc<dyn Embedder>)
        .collect();
    let ids: Vec<ImageId> = world.items.iter().map(|i| i.item_id).collect();
    let w = world.clone();
    let options = IndexOptions {
        index_kind: Some(kind),
        ..Default::default()
    };
    let corpus = index_corpus(&ids, |id| Ok(w.render(w.item(id).unwrap())), &embedders, &options, &|_| {}).unwrap();
    assert_eq!(corpus.manifest.len(), ids.len());
    Engine {
        generators: vec![Arc::new(MockGenerator::new("mock-g", world.clone(), 0.05))],
        embedders,
        stores: corpus.stores.into_iter().map(Arc::new).collect(),
        config: SearchConfig {
            guides_per_generator: 4,
            guide_size: (64, 64),
            ..Default::default()
        },
    }
}

fn query(text: &str, k: usize) -> QuerySpec {
    QuerySpec {
        query_id: "q".into(),
        text: text.into(),
        topic: DEFAULT_TOPIC.into(),
        k,
        feedback_mode: FeedbackMode::Off,
    }
}

fn uniform(engine: &Engine) -> BTreeMap<String, f64> {
    TrustTable::with_defaults(engine.embedder_ids()).weights(DEFAULT_TOPIC)
}

fn ids(outcome: &needle_core::pipeline::SearchOutcome) -> Vec<ImageId> {
    outcome.retrieval.results.iter().map(|s| s.image_id).collect()
}

#[test]
fn planted_item_and_concept_queries() {
    let world = world(200);
    let engine = engine(&world, IndexKind::Exact);
    let w = uniform(&engine);
    let out = engine.search(&query("item 17", 5), &w).unwrap();
    assert_eq!(ids(&out)[0], ImageId(17));
    assert_eq!(out.guides.len(), 4);

    let concept = &world.concepts[2];
    let out = engine.search(&query(&format!("a photo of a {}", concept.name), 10), &w).unwrap();
    let hits = ids(&out);
    assert_eq!(hits.len(), 10);
    for id in hits {
        assert_eq!(world.item(id).unwrap().concept_id, concept.concept_id, "{id:?}");
    }
}

#[test]
fn exact_and_hnsw_stores_agree_on_the_target() {
    let world = world(300);
    let exact = engine(&world, IndexKind::Exact);
    let hnsw = engine(&world, IndexKind::Hnsw);
    let w = uniform(&exact);
    for target in [3u64, 150, 299] {
        let q = query(&format!("item {target}"), 10);
        assert_eq!(ids(&exact.search(&q, &w).unwrap())[0], ImageId(target));
        assert_eq!(ids(&hnsw.search(&q, &w).unwrap())[0], ImageId(target));
    }
}

#[test]
fn reloaded_stores_answer_identically() {
    let world = world(120);
    let mut engine = engine(&world, IndexKind::Hnsw);
    let w = uniform(&engine);
    let q = query("item 64", 20);
    let before = engine.search(&q, &w).unwrap().retrieval;
    let dir = tempfile::tempdir().unwrap();
    engine.stores = engine
        .stores
        .iter()
        .map(|s| {
            let path = dir.path().join(format!("{}.ndle", s.embedder_id()));
            s.save(&path).unwrap();
            Arc::new(VecStore::load(&path).unwrap())
        })
        .collect();
    assert_eq!(engine.search(&q, &w).unwrap().retrieval, before);
}

#[test]
fn reviewed_guides_and_feedback_round() {
    let world = world(150);
    let engine = engine(&world, IndexKind::Exact);
    let mut table = TrustTable::with_defaults(engine.embedder_ids());
    let q = query("item 9", 5);
    let mut guides = engine.generate(&q).unwrap();
    guides[1].discarded = true;
    guides[1].reason = Some("rejected at review".into());
    let out = engine.search_reviewed(&q, guides, &table.weights(DEFAULT_TOPIC)).unwrap();
    assert!(out.anomaly.is_none());
    assert!(out.retrieval.ranked.iter().all(|l| l.guide_id != out.guides[1].guide_id));
    assert_eq!(ids(&out)[0], ImageId(9));

    // Marking the top hit irrelevant charges every embedder that ranked it.
    let returned = ids(&out);
    let feedback = FeedbackSet {
        query_id: q.query_id.clone(),
        irrelevant: BTreeSet::from([returned[0]]),
    };
    let losses = partial_loss(&out.retrieval.ranked, &feedback, &returned, q.k).unwrap();
    assert!(losses.values().all(|&l| l > 0.0 && l <= 1.0), "{losses:?}");
    table.update_weights(DEFAULT_TOPIC, &losses).unwrap();
    let after = table.weights(DEFAULT_TOPIC);
    assert!((after.values().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(table.weights("elsewhere"), TrustTable::with_defaults(engine.embedder_ids()).weights("elsewhere"));
}
