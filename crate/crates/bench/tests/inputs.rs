use needle_bench::{busy_image, random_ranked, random_store};
use needle_core::pipeline::{tile_image, IndexOptions};
use needle_core::{ImageId, IndexKind};

#[test]
fn inputs_are_deterministic_and_usable() {
    let a = random_store(200, 16, IndexKind::Hnsw, 9);
    let b = random_store(200, 16, IndexKind::Hnsw, 9);
    assert_eq!(a.len(), 200);
    assert_eq!(a.vector(17), b.vector(17));

    let lists = random_ranked(4, 30, 100, 2, 1);
    assert_eq!(lists.len(), 4);
    for l in &lists {
        let mut ids: Vec<_> = l.entries.iter().map(|e| e.image_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30, "no repeated image in a list");
    }

    let entry = tile_image(ImageId(0), &busy_image(1024, 768, 24), 0, &IndexOptions::default()).unwrap();
    assert!(entry.tiles.len() > 1);
}
