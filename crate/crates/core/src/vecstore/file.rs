//! Binary store file plus JSON manifest sidecar.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "NDLE" | version u16 = 1 | dim u32 | count u64 | id_len u16 | embedder_id utf-8
//! count x { tile_id u64 | image_id u64 | dim x f32 }
//! ```
//!
//! Both files are written to a temporary name and renamed into place; the
//! manifest goes last and loading requires it, so an interrupted save never
//! leaves a loadable half-store behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{StoreError, StoreManifest, VecStore};
use crate::ids::{ImageId, TileId};

pub const MAGIC: &[u8; 4] = b"NDLE";
pub const FORMAT_VERSION: u16 = 1;

/// `store.ndle` -> `store.ndle.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| StoreError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

impl VecStore {
    /// Serializes entries to the binary layout (manifest not included).
    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.manifest.embedder_id.as_bytes();
        let dim = self.manifest.dim;
        let mut out = Vec::with_capacity(20 + id.len() + self.len() * (16 + 4 * dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        for (tile, image, values) in self.entries() {
            out.extend_from_slice(&tile.0.to_le_bytes());
            out.extend_from_slice(&image.0.to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the binary layout; index kind and HNSW parameters come from
    /// `manifest`, which must agree with the file header.
    pub fn from_bytes(bytes: &[u8], manifest: StoreManifest) -> Result<Self, StoreError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(StoreError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let id_len = r.u16()? as usize;
        let embedder_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| StoreError::Format("embedder id is not utf-8".into()))?
            .to_owned();

        let record = 16 + 4 * dim as u64;
        let remaining = (bytes.len() - r.pos) as u64;
        if count.checked_mul(record) != Some(remaining) {
            return Err(StoreError::Format(format!(
                "expected {count} records of {record} bytes, found {remaining} bytes"
            )));
        }
        if embedder_id != manifest.embedder_id || dim != manifest.dim || count as usize != manifest.count {
            return Err(StoreError::Format("manifest does not match store header".into()));
        }

        let count = count as usize;
        let mut tile_ids = Vec::with_capacity(count);
        let mut image_ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        let mut seen = std::collections::HashSet::with_capacity(count);
        for _ in 0..count {
            let tile = TileId(r.u64()?);
            if !seen.insert(tile) {
                return Err(StoreError::DuplicateTile(tile));
            }
            tile_ids.push(tile);
            image_ids.push(ImageId(r.u64()?));
            for _ in 0..dim {
                data.push(f32::from_le_bytes(r.array()?));
            }
        }
        Ok(Self::from_parts(manifest, tile_ids, image_ids, data))
    }

    /// Writes `path` and its manifest sidecar (`path` + `.json`).
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_atomic(path, &self.to_bytes())?;
        write_atomic(&manifest_path(path), &serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let manifest: StoreManifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::vecstore::{IndexEntry, IndexKind};

    fn store(n: usize, kind: IndexKind) -> VecStore {
        let entries = (0..n)
            .map(|i| IndexEntry {
                tile_id: TileId(100 + i as u64),
                image_id: ImageId(i as u64 / 2),
                vector: EmbeddingVector::new("clip-b", &[i as f32 + 1.0, 1.0, -(i as f32)]).unwrap(),
            })
            .collect();
        VecStore::build(entries, StoreManifest::new("clip-b", 3, kind)).unwrap()
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let s = store(1, IndexKind::Exact);
        let b = s.to_bytes();
        assert_eq!(&b[0..4], b"NDLE");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[3, 0, 0, 0]);
        assert_eq!(&b[10..18], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[18..20], &[6, 0]);
        assert_eq!(&b[20..26], b"clip-b");
        assert_eq!(&b[26..34], &100u64.to_le_bytes());
        assert_eq!(&b[34..42], &0u64.to_le_bytes());
        assert_eq!(b.len(), 42 + 12);
        assert_eq!(&b[42..46], &s.vector(0)[0].to_le_bytes());
    }

    #[test]
    fn round_trip_empty_and_hnsw() {
        let dir = tempfile::tempdir().unwrap();
        for (n, kind) in [(0, IndexKind::Exact), (30, IndexKind::Hnsw)] {
            let s = store(n, kind);
            let p = dir.path().join(format!("s{n}.ndle"));
            s.save(&p).unwrap();
            let l = VecStore::load(&p).unwrap();
            assert_eq!(l.manifest(), s.manifest());
            assert_eq!(l.to_bytes(), s.to_bytes());
        }
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let s = store(5, IndexKind::Exact);
        let bytes = s.to_bytes();
        let m = s.manifest().clone();
        for cut in [0, 3, 10, 25, bytes.len() - 1] {
            assert!(matches!(
                VecStore::from_bytes(&bytes[..cut], m.clone()),
                Err(StoreError::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(VecStore::from_bytes(&bad, m.clone()), Err(StoreError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(VecStore::from_bytes(&bad, m), Err(StoreError::Format(_))));
    }

    #[test]
    fn missing_manifest_is_not_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ndle");
        fs::write(&p, store(3, IndexKind::Exact).to_bytes()).unwrap();
        assert!(matches!(VecStore::load(&p), Err(StoreError::Io(_))));
    }
}
