//! On-disk datasets and their indexes.
//!
//! A dataset is a directory of PNG/JPEG files under the dataset root. Image
//! ids are assigned by sorted file name. The index lives in `.needle/`:
//!
//! ```text
//! .needle/images.json            [{image_id, file}]
//! .needle/tiles.json             tile manifest
//! .needle/<embedder>.ndle(.json) one store per embedder
//! ```
//!
//! Indexes are built in a staging directory and swapped in by rename, so a
//! crash never leaves a loadable half-index.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use needle_core::adapter::decode_image;
use needle_core::pipeline::{index_corpus, IndexEvent, IndexOptions, PipelineError};
use needle_core::tiling::TileManifestEntry;
use needle_core::{Embedder, ImageId, Raster, VecStore};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const INDEX_DIR: &str = ".needle";
const STAGING_DIR: &str = ".needle.staging";
const RETIRED_DIR: &str = ".needle.old";
const IMAGES_FILE: &str = "images.json";
const TILES_FILE: &str = "tiles.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub file: String,
}

/// Loaded index of one dataset. Read-only once published.
pub struct DatasetIndex {
    pub dataset_id: String,
    pub dir: PathBuf,
    pub images: Vec<ImageRecord>,
    pub manifest: Vec<TileManifestEntry>,
    /// In configured embedder order.
    pub stores: Vec<Arc<VecStore>>,
}

impl DatasetIndex {
    pub fn image_path(&self, id: ImageId) -> Option<PathBuf> {
        self.images.get(id.0 as usize).map(|r| self.dir.join(&r.file))
    }

    pub fn tile_count(&self) -> usize {
        self.stores.first().map_or(0, |s| s.len())
    }
}

/// Ids name a directory directly under the root; no separators or dot files.
pub fn validate_dataset_id(id: &str) -> Result<(), ServiceError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(format!("invalid dataset id {id:?}")))
    }
}

pub fn dataset_dir(root: &Path, id: &str) -> Result<PathBuf, ServiceError> {
    validate_dataset_id(id)?;
    let dir = root.join(id);
    if !dir.is_dir() {
        return Err(ServiceError::not_found("dataset", id));
    }
    Ok(dir)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image file names in id order.
pub fn list_images(dir: &Path) -> Result<Vec<String>, ServiceError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if is_image(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn is_indexed(dir: &Path) -> bool {
    dir.join(INDEX_DIR).join(IMAGES_FILE).is_file()
}

/// File stem for an embedder's store.
pub fn store_stem(embedder_id: &str) -> String {
    embedder_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn store_file(index_dir: &Path, embedder_id: &str) -> PathBuf {
    index_dir.join(format!("{}.ndle", store_stem(embedder_id)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: ImageId,
    pub file: String,
    pub message: String,
}

#[derive(Debug)]
pub enum BuildError {
    Images(Vec<ImageFailure>),
    Other(ServiceError),
}

macro_rules! build_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for BuildError {
            fn from(e: $t) -> Self {
                BuildError::Other(e.into())
            }
        }
    )*};
}

build_error_from!(ServiceError, std::io::Error, needle_core::vecstore::StoreError, PipelineError);

/// Tiles and embeds every image of `dir` and publishes the index. Returns
/// the total tile count.
pub fn build_index(
    dir: &Path,
    embedders: &[Arc<dyn Embedder>],
    options: &IndexOptions,
    force: bool,
    progress: &(dyn Fn(IndexEvent) + Sync),
) -> Result<usize, BuildError> {
    if is_indexed(dir) && !force {
        return Err(already_indexed(dir).into());
    }
    let stems: BTreeSet<String> = embedders.iter().map(|e| store_stem(&e.descriptor().embedder_id)).collect();
    if stems.len() != embedders.len() {
        return Err(ServiceError::Config("embedder ids collide after file-name sanitizing".into()).into());
    }
    let files = list_images(dir)?;
    let ids: Vec<ImageId> = (0..files.len() as u64).map(ImageId).collect();
    let load = |id: ImageId| -> Result<Raster, String> {
        let bytes = fs::read(dir.join(&files[id.0 as usize])).map_err(|e| e.to_string())?;
        decode_image(&bytes).map_err(|e| e.to_string())
    };
    let corpus = match index_corpus(&ids, load, embedders, options, progress) {
        Err(PipelineError::Images(bad)) => {
            return Err(BuildError::Images(
                bad.into_iter()
                    .map(|(id, message)| ImageFailure {
                        image_id: id,
                        file: files[id.0 as usize].clone(),
                        message,
                    })
                    .collect(),
            ))
        }
        other => other?,
    };

    let staging = dir.join(STAGING_DIR);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let records: Vec<ImageRecord> = files
        .iter()
        .enumerate()
        .map(|(i, f)| ImageRecord {
            image_id: ImageId(i as u64),
            file: f.clone(),
        })
        .collect();
    for store in &corpus.stores {
        store.save(&store_file(&staging, store.embedder_id()))?;
    }
    fs::write(staging.join(TILES_FILE), serde_json::to_vec(&corpus.manifest).expect("manifest serializes"))?;
    // Written last: its presence marks a complete index.
    fs::write(staging.join(IMAGES_FILE), serde_json::to_vec_pretty(&records).expect("records serialize"))?;

    let live = dir.join(INDEX_DIR);
    let retired = dir.join(RETIRED_DIR);
    if live.exists() {
        if retired.exists() {
            fs::remove_dir_all(&retired)?;
        }
        fs::rename(&live, &retired)?;
    }
    fs::rename(&staging, &live)?;
    if retired.exists() {
        fs::remove_dir_all(&retired)?;
    }
    Ok(corpus.stores.first().map_or(0, |s| s.len()))
}

fn already_indexed(dir: &Path) -> ServiceError {
    ServiceError::conflict(
        "already_indexed",
        format!("{} is already indexed; pass force to rebuild", dir.display()),
    )
}

/// Loads the published index with one store per id in `embedder_ids`.
pub fn load_index(dataset_id: &str, dir: &Path, embedder_ids: &[String]) -> Result<DatasetIndex, ServiceError> {
    let index_dir = dir.join(INDEX_DIR);
    if !is_indexed(dir) {
        return Err(ServiceError::conflict("not_indexed", format!("dataset {dataset_id} has not been indexed")));
    }
    let images: Vec<ImageRecord> = serde_json::from_slice(&fs::read(index_dir.join(IMAGES_FILE))?)
        .map_err(|e| ServiceError::Config(format!("corrupt images.json: {e}")))?;
    let manifest: Vec<TileManifestEntry> = serde_json::from_slice(&fs::read(index_dir.join(TILES_FILE))?)
        .map_err(|e| ServiceError::Config(format!("corrupt tiles.json: {e}")))?;
    let mut stores = Vec::with_capacity(embedder_ids.len());
    for id in embedder_ids {
        let path = store_file(&index_dir, id);
        if !path.is_file() {
            return Err(ServiceError::conflict(
                "not_indexed",
                format!("dataset {dataset_id} has no store for embedder {id}; re-index with force"),
            ));
        }
        let store = VecStore::load(&path)?;
        if store.embedder_id() != id {
            return Err(ServiceError::Config(format!("store {} belongs to {}", path.display(), store.embedder_id())));
        }
        stores.push(Arc::new(store));
    }
    Ok(DatasetIndex {
        dataset_id: dataset_id.to_owned(),
        dir: dir.to_path_buf(),
        images,
        manifest,
        stores,
    })
}
