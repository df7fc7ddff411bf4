mod common;

use std::sync::Arc;

use needle_core::adapter::{decode_image, AdapterError, Raster};
use needle_core::generation::FeedbackMode;
use needle_core::simlab::{codec, make_world, MockEmbedder, MockGenerator, WorldConfig};
use needle_core::{Embedder, EmbedderDescriptor, Generator, GuideId, ImageId};
use needle_service::jobs::JobState;
use needle_service::{SearchRequest, Service, ServiceConfig, SessionState};

fn req(text: &str, k: usize, mode: FeedbackMode) -> SearchRequest {
    SearchRequest {
        text: text.into(),
        topic: Some("animals".into()),
        k: Some(k),
        feedback_mode: Some(mode),
        dataset: None,
    }
}

#[test]
fn feedback_off_concept_query_returns_k_results_of_the_concept() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 200, 4);
    let view = svc.search(req("a photo of a dolphin", 10, FeedbackMode::Off)).unwrap();
    assert_eq!(view.state, SessionState::Done, "{view:?}");
    assert_eq!(view.results.len(), 10);
    let world = svc.world().unwrap();
    let concept = world.concept_by_name("dolphin").unwrap().concept_id;
    assert!(view.results.iter().all(|r| world.item(r.image_id).unwrap().concept_id == concept));
    assert_eq!(view.results.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert_eq!(view.guides.len(), 4);
}

#[test]
fn feedback_on_parks_then_approve_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 100, 4);
    let started = svc.start_search(req("castle", 5, FeedbackMode::On)).unwrap();
    assert_eq!(started.state, SessionState::Generating);
    let parked = svc.run_search(&started.query_id).unwrap();
    assert_eq!(parked.state, SessionState::AwaitingReview);
    assert!(parked.results.is_empty());
    let guides = svc.guides(&parked.query_id).unwrap();
    assert_eq!(guides.guides.len(), 4);
    assert!(guides.guides.iter().all(|g| !g.png_b64.is_empty() && !g.discarded));

    // Feedback before results exist is refused.
    assert_eq!(svc.submit_feedback(&parked.query_id, &[]).unwrap_err().code(), "invalid_state");
    assert_eq!(svc.approve_guides(&parked.query_id, &[]).unwrap_err().code(), "bad_request");
    assert_eq!(svc.approve_guides(&parked.query_id, &[GuideId(99)]).unwrap_err().code(), "bad_request");

    let keep = [GuideId(0), GuideId(1), GuideId(2)];
    let searching = svc.approve_guides(&parked.query_id, &keep).unwrap();
    assert_eq!(searching.state, SessionState::Searching);
    assert_eq!(svc.approve_guides(&parked.query_id, &keep).unwrap_err().code(), "invalid_state");
    let done = svc.resume_search(&parked.query_id).unwrap();
    assert_eq!(done.state, SessionState::Done, "{done:?}");
    assert_eq!(done.results.len(), 5);
    let rejected: Vec<_> = done.guides.iter().filter(|g| g.discarded).collect();
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0].guide_id, GuideId(3));
    assert!(rejected[0].reason.is_some());
    // Thumbnails survive the release of the full rasters.
    assert!(svc.guides(&parked.query_id).unwrap().guides.iter().all(|g| !g.png_b64.is_empty()));
}

#[test]
fn keep_all_review_matches_unscreened_automatic_search() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::mock_config(dir.path(), 80, 4);
    config.anomaly.enabled = false;
    let svc = Service::new(config).unwrap();
    svc.index_blocking("default", false, &|_| {}).unwrap();
    let auto = svc.search(req("forest", 8, FeedbackMode::Off)).unwrap();
    let parked = svc.search(req("forest", 8, FeedbackMode::On)).unwrap();
    let all: Vec<GuideId> = (0..4).map(GuideId).collect();
    svc.approve_guides(&parked.query_id, &all).unwrap();
    let reviewed = svc.resume_search(&parked.query_id).unwrap();
    assert_eq!(auto.results, reviewed.results);
}

#[test]
fn feedback_validation_replay_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 100, 4);
    let done = svc.search(req("guitar", 10, FeedbackMode::Off)).unwrap();
    let before = svc.weights();
    assert_eq!(svc.submit_feedback(&done.query_id, &[ImageId(100_000)]).unwrap_err().code(), "bad_request");
    // The rejected attempt does not consume the one allowed submission.
    let bad = done.results[0].image_id;
    let out = svc.submit_feedback(&done.query_id, &[bad]).unwrap();
    assert_eq!(out.topic, "animals");
    assert!((out.weights.values().sum::<f64>() - 1.0).abs() < 1e-9);
    let replay = svc.submit_feedback(&done.query_id, &[bad]).unwrap_err();
    assert_eq!((replay.code(), replay.status()), ("feedback_replayed", 409));
    // Only the session's topic moved.
    let after = svc.weights();
    assert_eq!(after.topics.keys().collect::<Vec<_>>(), vec!["animals"]);
    assert_eq!(before.uniform, after.uniform);

    let reloaded = Service::new(svc.config().clone()).unwrap();
    assert_eq!(reloaded.trust_snapshot(), svc.trust_snapshot());
}

#[test]
fn empty_feedback_leaves_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 60, 4);
    let done = svc.search(req("igloo", 5, FeedbackMode::Off)).unwrap();
    let before = svc.trust_snapshot();
    let out = svc.submit_feedback(&done.query_id, &[]).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(svc.trust_snapshot(), before);
    assert_eq!(svc.submit_feedback(&done.query_id, &[]).unwrap_err().code(), "feedback_replayed");
}

#[test]
fn request_validation() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 20, 2);
    assert_eq!(svc.start_search(req("   ", 5, FeedbackMode::Off)).unwrap_err().status(), 400);
    assert_eq!(svc.start_search(req("apple", 0, FeedbackMode::Off)).unwrap_err().status(), 400);
    let mut r = req("apple", 5, FeedbackMode::Off);
    r.dataset = Some("../etc".into());
    assert_eq!(svc.start_search(r).unwrap_err().status(), 400);
    let mut r = req("apple", 5, FeedbackMode::Off);
    r.dataset = Some("nope".into());
    assert_eq!(svc.start_search(r).unwrap_err().status(), 404);
    assert_eq!(svc.session("q999999").unwrap_err().status(), 404);
}

#[test]
fn unknown_concept_fails_the_session_with_cause() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 20, 2);
    let view = svc.search(req("a spaceship", 5, FeedbackMode::Off)).unwrap();
    assert_eq!(view.state, SessionState::Failed);
    let err = view.error.unwrap();
    assert_eq!(err.code, "adapter_error");
    assert!(err.message.contains("mock-g"), "{}", err.message);
}

#[test]
fn default_k_is_sixty() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 100, 2);
    let view = svc
        .search(SearchRequest {
            text: "harbor".into(),
            ..Default::default()
        })
        .unwrap();
    assert_eq!((view.k, view.topic.as_str(), view.results.len()), (60, "general", 60));
}

#[test]
fn index_jobs_conflict_force_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(Service::new(common::mock_config(dir.path(), 10, 2)).unwrap());
    let seen = std::sync::Mutex::new(Vec::new());
    let job = svc
        .index_blocking("default", false, &|p| seen.lock().unwrap().push(p.clone()))
        .unwrap();
    assert_eq!((job.state, job.count), (JobState::Done, Some(10)));
    let seen = seen.into_inner().unwrap();
    assert!(seen.windows(2).all(|w| w[0].images_done <= w[1].images_done && w[0].tiles_done <= w[1].tiles_done));
    assert_eq!(job.progress.images_done, 10);
    assert_eq!(job.progress.embeddings_done.len(), 2);
    assert!(job.progress.embeddings_done.values().all(|&n| n == 10));
    for store in ["mock-e1.ndle", "mock-e2.ndle"] {
        assert!(svc.config().dataset_root.join("default/.needle").join(store).is_file());
    }
    assert_eq!(svc.index_blocking("default", false, &|_| {}).unwrap_err().code(), "already_indexed");
    let again = svc.start_index("default", true).unwrap();
    let done = wait_job(&svc, &again.job_id);
    assert_eq!((done.state, done.count), (JobState::Done, Some(10)));

    std::fs::create_dir_all(svc.config().dataset_root.join("empty")).unwrap();
    let empty = svc.index_blocking("empty", false, &|_| {}).unwrap();
    assert_eq!((empty.state, empty.count), (JobState::Done, Some(0)));
    assert_eq!(svc.index_blocking("missing", false, &|_| {}).unwrap_err().status(), 404);
}

#[test]
fn bad_image_fails_job_with_per_image_errors() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::new(common::mock_config(dir.path(), 4, 2)).unwrap();
    std::fs::write(svc.config().dataset_root.join("default/zzz.png"), b"garbage").unwrap();
    let job = svc.index_blocking("default", false, &|_| {}).unwrap();
    assert_eq!(job.state, JobState::Failed);
    assert_eq!(job.errors.len(), 1);
    assert_eq!((job.errors[0].image_id, job.errors[0].file.as_str()), (ImageId(4), "zzz.png"));
    // Nothing was published.
    assert_eq!(svc.start_search(req("apple", 1, FeedbackMode::Off)).unwrap_err().code(), "not_indexed");
}

#[test]
fn images_and_thumbnails() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 10, 2);
    let orig = svc.image(None, ImageId(3), None).unwrap();
    assert_eq!(orig.content_type, "image/png");
    let file = std::fs::read(svc.config().dataset_root.join("default/item_00003.png")).unwrap();
    assert_eq!(*orig.bytes, file);
    let thumb = svc.image(Some("default"), ImageId(3), Some(16)).unwrap();
    assert_eq!(decode_image(&thumb.bytes).unwrap().dimensions(), (16, 16));
    assert!(Arc::ptr_eq(&thumb.bytes, &svc.image(None, ImageId(3), Some(16)).unwrap().bytes));
    assert_eq!(svc.image(None, ImageId(10), None).err().unwrap().status(), 404);
}

/// Embedder that ranks the corpus against the guide so that item 1 is
/// its nearest neighbour while the plain mock puts item 0 first.
struct Contrarian {
    descriptor: EmbedderDescriptor,
    item0: Vec<f32>,
}

impl Embedder for Contrarian {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed(&self, images: &[&Raster]) -> Result<Vec<Vec<f32>>, AdapterError> {
        Ok(images
            .iter()
            .map(|img| {
                let corpus_item0 = img.width() == 64 && codec::decode_latent(img).as_deref() == Some(&self.item0[..]);
                if corpus_item0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            })
            .collect())
    }
}

#[test]
fn irrelevant_top_hit_of_one_embedder_lowers_its_weight() {
    let dir = tempfile::tempdir().unwrap();
    let world = make_world(WorldConfig { n_items: 2, ..Default::default() }).unwrap();
    world.export(&dir.path().join("datasets/default")).unwrap();
    let mut config = ServiceConfig::mock(dir.path().join("datasets"), dir.path().join("trust.json"));
    config.search.guides_per_generator = 1;
    config.search.guide_size = (48, 48);
    let item0: Vec<f32> = world.items[0].latent.iter().map(|&x| x as f32).collect();
    let embedders: Vec<Arc<dyn Embedder>> = vec![
        Arc::new(MockEmbedder::for_world(&world, "a", 0.0)),
        Arc::new(Contrarian {
            descriptor: EmbedderDescriptor::new("b", 2, "test:"),
            item0,
        }),
    ];
    let generators: Vec<Arc<dyn Generator>> = vec![Arc::new(MockGenerator::new("g", world.clone(), 0.0))];
    let svc = Service::with_adapters(config, embedders, generators, Some(world)).unwrap();
    svc.index_blocking("default", false, &|_| {}).unwrap();

    // One guide, k = 1: a ranks item 0 first, b ranks item 1 first; the
    // equal-score tie goes to the smaller id.
    let done = svc.search(req("item 0", 1, FeedbackMode::Off)).unwrap();
    assert_eq!(done.results.len(), 1);
    assert_eq!(done.results[0].image_id, ImageId(0));
    let out = svc.submit_feedback(&done.query_id, &[ImageId(0)]).unwrap();
    assert_eq!(out.losses["a"], 1.0);
    assert_eq!(out.losses["b"], 0.0);
    // (0.5 * 0.9, 0.5) / 0.95
    assert!((out.weights["a"] - 0.473684).abs() < 1e-6, "{:?}", out.weights);
    assert!((out.weights["b"] - 0.526316).abs() < 1e-6);
}

fn wait_job(svc: &Service, job_id: &str) -> needle_service::IndexJobView {
    for _ in 0..600 {
        let j = svc.job(job_id).unwrap();
        if matches!(j.state, JobState::Done | JobState::Failed) {
            return j;
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    panic!("job {job_id} did not finish");
}
