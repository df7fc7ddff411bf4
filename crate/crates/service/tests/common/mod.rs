#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use needle_core::simlab::{make_world, WorldConfig};
use needle_service::{Service, ServiceConfig};

/// All-mock config rooted in `dir` with a world of `n_items` items exported
/// as dataset `default`.
pub fn mock_config(dir: &Path, n_items: usize, guides: usize) -> ServiceConfig {
    let mut c = ServiceConfig::mock(dir.join("datasets"), dir.join("trust.json"));
    c.mock_world.world = WorldConfig {
        n_items,
        ..Default::default()
    };
    c.search.guides_per_generator = guides;
    c.search.guide_size = (64, 64);
    let world = make_world(c.mock_world.world.clone()).unwrap();
    world.export(&c.dataset_root.join("default")).unwrap();
    c
}

/// Mock service with the default dataset already indexed.
pub fn indexed_service(dir: &Path, n_items: usize, guides: usize) -> Arc<Service> {
    let svc = Arc::new(Service::new(mock_config(dir, n_items, guides)).unwrap());
    let job = svc.index_blocking("default", false, &|_| {}).unwrap();
    assert_eq!(job.count, Some(n_items), "{job:?}");
    svc
}
