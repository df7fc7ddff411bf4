//! Seeded synthetic world: named concept vectors and a corpus of items whose
//! latents scatter around their concept.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{codec, normalize_f64, Noise, SimError};
use crate::adapter::Raster;
use crate::ids::ImageId;

const CONCEPT_NAMES: &[&str] = &[
    "apple", "bicycle", "castle", "dolphin", "elephant", "forest", "guitar", "harbor", "igloo", "jellyfish",
    "kite", "lighthouse", "mountain", "notebook", "owl", "piano", "quilt", "rocket", "sunflower", "tractor",
    "umbrella", "volcano", "waterfall", "xylophone", "yacht", "zebra",
];

/// Raster size of corpus items.
pub const ITEM_RASTER: (u32, u32) = (64, 64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_items: usize,
    pub latent_dim: usize,
    pub n_concepts: usize,
    /// Expected norm of the noise added to a concept vector per item.
    pub sigma_item: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_items: 1000,
            latent_dim: 32,
            n_concepts: 10,
            sigma_item: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub concept_id: usize,
    pub name: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ImageId,
    pub concept_id: usize,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub concepts: Vec<Concept>,
    pub items: Vec<Item>,
}

fn concept_name(i: usize) -> String {
    let base = CONCEPT_NAMES[i % CONCEPT_NAMES.len()];
    match i / CONCEPT_NAMES.len() {
        0 => base.to_owned(),
        n => format!("{base}{n}"),
    }
}

/// Builds a world. Concept vectors are orthonormal when `latent_dim` allows,
/// otherwise independent random directions. Item `i` belongs to concept
/// `i % n_concepts`.
pub fn make_world(config: WorldConfig) -> Result<Arc<SyntheticWorld>, SimError> {
    if config.latent_dim < 2 {
        return Err(SimError::Argument("latent_dim must be at least 2".into()));
    }
    if config.n_items < 1 || config.n_concepts < 1 {
        return Err(SimError::Argument("need at least one item and one concept".into()));
    }
    if !(config.sigma_item >= 0.0) {
        return Err(SimError::Argument("sigma_item must be non-negative".into()));
    }
    if !codec::fits(ITEM_RASTER, config.latent_dim) {
        return Err(SimError::Argument("latent_dim too large for item rasters".into()));
    }
    let d = config.latent_dim;
    let mut noise = Noise::new(config.seed);
    let orthogonal = config.n_concepts <= d;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(config.n_concepts);
    while vectors.len() < config.n_concepts {
        let mut v: Vec<f64> = (0..d).map(|_| noise.gaussian()).collect();
        if orthogonal {
            for u in &vectors {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= p * b;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            vectors.push(normalize_f64(&v));
        }
    }
    let concepts: Vec<Concept> = vectors
        .into_iter()
        .enumerate()
        .map(|(i, vector)| Concept {
            concept_id: i,
            name: concept_name(i),
            vector,
        })
        .collect();
    let items = (0..config.n_items)
        .map(|i| {
            let c = i % config.n_concepts;
            let n = noise.isotropic(d, config.sigma_item);
            let raw: Vec<f64> = concepts[c].vector.iter().zip(&n).map(|(a, b)| a + b).collect();
            Item {
                item_id: ImageId(i as u64),
                concept_id: c,
                latent: normalize_f64(&raw),
            }
        })
        .collect();
    Ok(Arc::new(SyntheticWorld {
        config,
        concepts,
        items,
    }))
}

impl SyntheticWorld {
    pub fn item(&self, id: ImageId) -> Option<&Item> {
        self.items.get(id.0 as usize).filter(|i| i.item_id == id)
    }

    pub fn concept_by_name(&self, name: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.name == name)
    }

    pub fn render(&self, item: &Item) -> Raster {
        let latent: Vec<f32> = item.latent.iter().map(|&x| x as f32).collect();
        codec::encode_latent(&latent, ITEM_RASTER).expect("checked at construction")
    }

    /// File name of an item's PNG; zero-padded so name order is id order.
    pub fn item_file_name(&self, id: ImageId) -> String {
        let width = self.items.len().saturating_sub(1).to_string().len().max(5);
        format!("item_{:0width$}.png", id.0)
    }

    /// Writes every item as a PNG into `dir`, plus `world.json` with the
    /// concepts and item assignments. Returns the number of images written.
    pub fn export(&self, dir: &Path) -> std::io::Result<usize> {
        std::fs::create_dir_all(dir)?;
        for item in &self.items {
            std::fs::write(dir.join(self.item_file_name(item.item_id)), crate::adapter::encode_png(&self.render(item)))?;
        }
        let meta = serde_json::json!({
            "config": self.config,
            "concepts": self.concepts.iter().map(|c| serde_json::json!({"concept_id": c.concept_id, "name": c.name})).collect::<Vec<_>>(),
            "items": self.items.iter().map(|i| serde_json::json!({"item_id": i.item_id, "concept_id": i.concept_id})).collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("world.json"), serde_json::to_vec_pretty(&meta).expect("json"))?;
        Ok(self.items.len())
    }

    /// Items sharing `concept_id`, in id order.
    pub fn relevant(&self, concept_id: usize) -> Vec<ImageId> {
        self.items.iter().filter(|i| i.concept_id == concept_id).map(|i| i.item_id).collect()
    }

    /// Latent direction a prompt refers to: `item N` names a single item,
    /// otherwise the longest concept name appearing as a word wins.
    pub fn resolve_prompt(&self, prompt: &str) -> Option<Vec<f64>> {
        let lower = prompt.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        for pair in words.windows(2) {
            if pair[0] == "item" {
                if let Ok(n) = pair[1].parse::<u64>() {
                    return self.item(ImageId(n)).map(|i| i.latent.clone());
                }
            }
        }
        self.concepts
            .iter()
            .filter(|c| words.contains(&c.name.as_str()))
            .max_by(|a, b| a.name.len().cmp(&b.name.len()).then(b.concept_id.cmp(&a.concept_id)))
            .map(|c| c.vector.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn export_round_trips_latents() {
        let w = make_world(WorldConfig { n_items: 12, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(w.export(dir.path()).unwrap(), 12);
        let bytes = std::fs::read(dir.path().join("item_00011.png")).unwrap();
        let img = crate::adapter::decode_image(&bytes).unwrap();
        let latent = codec::decode_latent(&img).unwrap();
        let want: Vec<f32> = w.items[11].latent.iter().map(|&x| x as f32).collect();
        assert_eq!(latent, want);
        assert!(dir.path().join("world.json").is_file());
    }

    #[test]
    fn deterministic() {
        let c = WorldConfig { n_items: 50, ..Default::default() };
        assert_eq!(make_world(c.clone()).unwrap(), make_world(c).unwrap());
    }

    #[test]
    fn noiseless_single_concept() {
        let w = make_world(WorldConfig { n_items: 5, n_concepts: 1, sigma_item: 0.0, ..Default::default() }).unwrap();
        assert!(w.items.iter().all(|i| i.latent == w.items[0].latent));
    }

    #[test]
    fn orthogonal_concepts_are_distance_one() {
        let w = make_world(WorldConfig { n_items: 2, n_concepts: 2, sigma_item: 0.0, latent_dim: 8, ..Default::default() })
            .unwrap();
        assert!((1.0 - cos(&w.items[0].latent, &w.items[1].latent) - 1.0).abs() < 1e-12);
        assert_eq!((w.items[0].concept_id, w.items[1].concept_id), (0, 1));
    }

    #[test]
    fn prompt_resolution() {
        let w = make_world(WorldConfig { n_items: 20, ..Default::default() }).unwrap();
        assert_eq!(w.resolve_prompt("a sketch of a Dolphin").unwrap(), w.concepts[3].vector);
        assert_eq!(w.resolve_prompt("item 12").unwrap(), w.items[12].latent);
        assert!(w.resolve_prompt("item 99").is_none());
        assert!(w.resolve_prompt("nothing here").is_none());
    }

    #[test]
    fn invalid_configs() {
        assert!(make_world(WorldConfig { latent_dim: 1, ..Default::default() }).is_err());
        assert!(make_world(WorldConfig { n_items: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn rendering_round_trips_latent() {
        let w = make_world(WorldConfig { n_items: 3, ..Default::default() }).unwrap();
        let back = codec::decode_latent(&w.render(&w.items[2])).unwrap();
        for (a, b) in back.iter().zip(&w.items[2].latent) {
            assert_eq!(*a, *b as f32);
        }
    }
}
