use image::Rgb;
use imageproc::drawing::draw_hollow_rect_mut;
use serde::{Deserialize, Serialize};

use super::Rect;
use crate::adapter::Raster;
use crate::ids::{ImageId, TileId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTile {
    pub tile_id: TileId,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl ManifestTile {
    pub fn new(tile_id: TileId, r: Rect) -> Self {
        Self { tile_id, x: r.x, y: r.y, w: r.w, h: r.h }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }
}

/// One element of the corpus tile manifest (a JSON array of these).
///
/// `full_tile_id` names the whole-image tile; it is one of `tiles` when the
/// image was not split, otherwise it is listed after the leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileManifestEntry {
    pub image_id: ImageId,
    pub tiles: Vec<ManifestTile>,
    pub full_tile_id: TileId,
}

/// Copy of `image` with every tile outlined.
pub fn draw_tile_overlay(image: &Raster, tiles: &[Rect]) -> Raster {
    let mut out = image.clone();
    for t in tiles {
        let r = imageproc::rect::Rect::at(t.x as i32, t.y as i32).of_size(t.w.max(1), t.h.max(1));
        draw_hollow_rect_mut(&mut out, r, Rgb([255, 0, 0]));
    }
    out
}
