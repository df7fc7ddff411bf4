//! Density-balanced recursive tiling.
//!
//! Proxy objects come from an edge map ([`detect_objects`]); [`smart_tile`]
//! then halves a region along one axis until every region holds at most `d`
//! objects or has become narrower than `min_size`. The whole image is always
//! kept as an extra tile so large objects are never lost to a split.

mod detect;
mod manifest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ImageId;

pub use detect::{detect_objects, detect_objects_in_bytes, EdgeParams};
pub use manifest::{draw_tile_overlay, ManifestTile, TileManifestEntry};

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("cannot decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("invalid edge thresholds: low {low} must be below high {high}")]
    Thresholds { low: f32, high: f32 },
    #[error("invalid tiling config: {0}")]
    Config(&'static str),
}

/// Axis-aligned pixel rectangle with top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    /// Interiors overlap (shared edges do not count).
    pub fn intersects(&self, other: &Rect) -> bool {
        (self.x as u64) < other.right()
            && (other.x as u64) < self.right()
            && (self.y as u64) < other.bottom()
            && (other.y as u64) < self.bottom()
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64 && px < self.right() as f64 && py >= self.y as f64 && py < self.bottom() as f64
    }

    pub fn aspect(&self) -> f64 {
        let (long, short) = if self.w >= self.h { (self.w, self.h) } else { (self.h, self.w) };
        long as f64 / short.max(1) as f64
    }

    /// Left and right halves. The right half absorbs the odd pixel.
    pub fn split_vertical(&self) -> (Rect, Rect) {
        let half = self.w / 2;
        (
            Rect::new(self.x, self.y, half, self.h),
            Rect::new(self.x + half, self.y, self.w - half, self.h),
        )
    }

    /// Top and bottom halves. The bottom half absorbs the odd pixel.
    pub fn split_horizontal(&self) -> (Rect, Rect) {
        let half = self.h / 2;
        (
            Rect::new(self.x, self.y, self.w, half),
            Rect::new(self.x, self.y + half, self.w, self.h - half),
        )
    }
}

/// Proxy object: one connected component of the edge map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeObject {
    pub object_id: u32,
    pub bbox: Rect,
}

/// How an object is attributed to a region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    /// Counted in every region its bounding box overlaps.
    #[default]
    Intersects,
    /// Counted only in the region containing its bounding-box centre.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    /// Maximum number of objects per tile.
    pub d: usize,
    pub min_size: u32,
    /// Largest accepted long-side / short-side ratio for a child tile.
    pub aspect_limit: f64,
    pub counting: CountingMode,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            d: 5,
            min_size: 224,
            aspect_limit: 3.0,
            counting: CountingMode::Intersects,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<(), TilingError> {
        if self.d < 1 {
            return Err(TilingError::Config("d must be at least 1"));
        }
        if self.min_size < 1 {
            return Err(TilingError::Config("min_size must be at least 1"));
        }
        if !(self.aspect_limit >= 1.0) {
            return Err(TilingError::Config("aspect_limit must be at least 1"));
        }
        Ok(())
    }
}

/// Tiles for one image: leaf tiles partition the image; `full` is the whole
/// image, embedded alongside the leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSet {
    pub image_id: ImageId,
    pub tiles: Vec<Rect>,
    pub full: Rect,
}

impl TileSet {
    pub fn includes_full_image(&self) -> bool {
        true
    }

    /// Leaves plus the full image, without repeating the full image when it is
    /// itself the only leaf.
    pub fn distinct_rects(&self) -> Vec<Rect> {
        let mut rects = self.tiles.clone();
        if !(rects.len() == 1 && rects[0] == self.full) {
            rects.push(self.full);
        }
        rects
    }
}

/// Number of objects attributed to `region`.
pub fn count_objects(objects: &[EdgeObject], region: &Rect) -> usize {
    count_objects_with(objects, region, CountingMode::Intersects)
}

pub fn count_objects_with(objects: &[EdgeObject], region: &Rect, mode: CountingMode) -> usize {
    match mode {
        CountingMode::Intersects => objects.iter().filter(|o| o.bbox.intersects(region)).count(),
        CountingMode::Centroid => objects
            .iter()
            .filter(|o| {
                let cx = o.bbox.x as f64 + o.bbox.w as f64 / 2.0;
                let cy = o.bbox.y as f64 + o.bbox.h as f64 / 2.0;
                region.contains_point(cx, cy)
            })
            .count(),
    }
}

/// True when a region must not be split further.
pub fn is_leaf(region: &Rect, objects: &[EdgeObject], config: &TilingConfig) -> bool {
    count_objects_with(objects, region, config.counting) <= config.d
        || region.w < config.min_size
        || region.h < config.min_size
        || (region.w < 2 && region.h < 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Vertical,
    Horizontal,
}

fn choose_axis(region: &Rect, objects: &[EdgeObject], config: &TilingConfig) -> Axis {
    let can_v = region.w >= 2;
    let can_h = region.h >= 2;
    if !can_v {
        return Axis::Horizontal;
    }
    if !can_h {
        return Axis::Vertical;
    }

    let count = |r: &Rect| count_objects_with(objects, r, config.counting);
    let (left, right) = region.split_vertical();
    let (top, bottom) = region.split_horizontal();
    let balance_v = count(&left).abs_diff(count(&right));
    let balance_h = count(&top).abs_diff(count(&bottom));

    let preferred = match balance_v.cmp(&balance_h) {
        std::cmp::Ordering::Less => Axis::Vertical,
        std::cmp::Ordering::Greater => Axis::Horizontal,
        std::cmp::Ordering::Equal if region.w >= region.h => Axis::Vertical,
        std::cmp::Ordering::Equal => Axis::Horizontal,
    };

    let reasonable = |a: &Rect, b: &Rect| a.aspect() <= config.aspect_limit && b.aspect() <= config.aspect_limit;
    let v_ok = reasonable(&left, &right);
    let h_ok = reasonable(&top, &bottom);
    match preferred {
        Axis::Vertical if !v_ok && h_ok => Axis::Horizontal,
        Axis::Horizontal if !h_ok && v_ok => Axis::Vertical,
        axis => axis,
    }
}

/// Recursively splits an image of `image_size` so every leaf holds at most
/// `config.d` objects or is smaller than `config.min_size` on a side.
///
/// Split axis: the one whose halves have the smaller object-count imbalance;
/// ties go to the longer side (vertical when square). An axis producing a
/// child beyond `aspect_limit` is skipped when the other axis is acceptable.
/// Leaves are emitted in depth-first order (left/top child first).
pub fn smart_tile(
    image_id: ImageId,
    image_size: (u32, u32),
    objects: &[EdgeObject],
    config: &TilingConfig,
) -> TileSet {
    let (w, h) = image_size;
    let full = Rect::new(0, 0, w.max(1), h.max(1));
    let mut tiles = Vec::new();
    let mut stack = vec![full];
    while let Some(region) = stack.pop() {
        if is_leaf(&region, objects, config) {
            tiles.push(region);
            continue;
        }
        let (a, b) = match choose_axis(&region, objects, config) {
            Axis::Vertical => region.split_vertical(),
            Axis::Horizontal => region.split_horizontal(),
        };
        // Push second child first so the first child is processed first.
        stack.push(b);
        stack.push(a);
    }
    TileSet { image_id, tiles, full }
}
