//! Deterministic inputs shared by the benchmarks.

use needle_core::retrieval::{RankedEntry, RankedList};
use needle_core::vecstore::{IndexEntry, StoreManifest};
use needle_core::{EmbeddingVector, GuideId, ImageId, IndexKind, Raster, TileId, VecStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EMBEDDER: &str = "bench";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingVector::new(EMBEDDER, &v).expect("non-zero vector")
}

/// `n` random unit vectors, one tile per image.
pub fn random_store(n: usize, dim: usize, kind: IndexKind, seed: u64) -> VecStore {
    let mut r = rng(seed);
    let entries = (0..n)
        .map(|i| IndexEntry {
            tile_id: TileId(i as u64),
            image_id: ImageId(i as u64),
            vector: random_unit(&mut r, dim),
        })
        .collect();
    VecStore::build(entries, StoreManifest::new(EMBEDDER, dim, kind)).expect("valid store")
}

/// `lists` ranked lists of length `len` drawn from `pool` images, spread over
/// `embedders` embedder ids.
pub fn random_ranked(lists: usize, len: usize, pool: u64, embedders: usize, seed: u64) -> Vec<RankedList> {
    let mut r = rng(seed);
    (0..lists)
        .map(|l| {
            let mut ids: Vec<u64> = (0..pool).collect();
            for i in 0..len.min(ids.len()) {
                let j = r.random_range(i..ids.len());
                ids.swap(i, j);
            }
            RankedList {
                guide_id: GuideId((l / embedders) as u32),
                embedder_id: format!("e{}", l % embedders),
                entries: ids[..len.min(ids.len())]
                    .iter()
                    .enumerate()
                    .map(|(p, &id)| RankedEntry {
                        image_id: ImageId(id),
                        best_tile_id: TileId(id),
                        distance: p as f64 * 0.01,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// White canvas with `n` black squares on a grid, for edge detection.
pub fn busy_image(w: u32, h: u32, n: u32) -> Raster {
    let mut img = Raster::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let cols = (n as f64).sqrt().ceil() as u32;
    let rows = n.div_ceil(cols);
    let (cw, ch) = (w / cols, h / rows);
    for i in 0..n {
        let (x0, y0) = ((i % cols) * cw + cw / 4, (i / cols) * ch + ch / 4);
        for y in y0..y0 + ch / 2 {
            for x in x0..x0 + cw / 2 {
                img.put_pixel(x, y, image::Rgb([0, 0, 0]));
            }
        }
    }
    img
}

/// Points of a tight cluster in `dim` dimensions.
pub fn cluster(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..dim).map(|_| r.random_range(-0.1..0.1)).collect()).collect()
}
