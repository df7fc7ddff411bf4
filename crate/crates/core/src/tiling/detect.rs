use image::{GrayImage, Luma};
use imageproc::edges::canny;
use imageproc::region_labelling::{connected_components, Connectivity};
use serde::{Deserialize, Serialize};

use super::{EdgeObject, Rect, TilingError};

/// Canny thresholds (on 8-bit gradient magnitude) and the minimum
/// connected-component size kept as an object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeParams {
    pub low: f32,
    pub high: f32,
    /// Components with fewer edge pixels than this are dropped.
    pub min_component_area: u32,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            low: 100.0,
            high: 200.0,
            min_component_area: 4,
        }
    }
}

/// Decodes `bytes` and runs [`detect_objects`] on the grayscale image.
pub fn detect_objects_in_bytes(bytes: &[u8], params: &EdgeParams) -> Result<Vec<EdgeObject>, TilingError> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    detect_objects(&gray, params)
}

/// Bounding boxes of the 8-connected components of the Canny edge map.
///
/// Objects are ordered by label, i.e. by the raster-scan position of each
/// component's first pixel.
pub fn detect_objects(gray: &GrayImage, params: &EdgeParams) -> Result<Vec<EdgeObject>, TilingError> {
    if !(params.low < params.high) || params.low < 0.0 {
        return Err(TilingError::Thresholds {
            low: params.low,
            high: params.high,
        });
    }
    let (w, h) = gray.dimensions();
    if w < 3 || h < 3 {
        return Ok(Vec::new());
    }
    let edges = canny(gray, params.low, params.high);
    let labels = connected_components(&edges, Connectivity::Eight, Luma([0u8]));

    // label -> (min_x, min_y, max_x, max_y, pixel count)
    let mut boxes: Vec<(u32, u32, u32, u32, u32)> = Vec::new();
    for (x, y, px) in labels.enumerate_pixels() {
        let label = px[0] as usize;
        if label == 0 {
            continue;
        }
        if boxes.len() < label {
            boxes.resize(label, (u32::MAX, u32::MAX, 0, 0, 0));
        }
        let b = &mut boxes[label - 1];
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
        b.4 += 1;
    }

    Ok(boxes
        .into_iter()
        .filter(|b| b.4 >= params.min_component_area && b.4 > 0)
        .enumerate()
        .map(|(i, (x0, y0, x1, y1, _))| EdgeObject {
            object_id: i as u32,
            bbox: Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> GrayImage {
        GrayImage::from_fn(200, 200, |x, y| {
            if (10..110).contains(&x) && (10..110).contains(&y) {
                Luma([0])
            } else {
                Luma([255])
            }
        })
    }

    #[test]
    fn uniform_image_has_no_objects() {
        let img = GrayImage::from_pixel(64, 48, Luma([128]));
        assert!(detect_objects(&img, &EdgeParams::default()).unwrap().is_empty());
    }

    #[test]
    fn filled_square_is_one_object() {
        let objs = detect_objects(&square_image(), &EdgeParams::default()).unwrap();
        assert_eq!(objs.len(), 1, "{objs:?}");
        let b = objs[0].bbox;
        for (got, want) in [(b.x, 10), (b.y, 10), (b.w, 100), (b.h, 100)] {
            assert!((got as i64 - want).abs() <= 2, "{b:?}");
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let img = square_image();
        let p = EdgeParams::default();
        assert_eq!(detect_objects(&img, &p).unwrap(), detect_objects(&img, &p).unwrap());
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let p = EdgeParams { low: 200.0, high: 100.0, ..Default::default() };
        assert!(matches!(detect_objects(&square_image(), &p), Err(TilingError::Thresholds { .. })));
    }

    #[test]
    fn undecodable_bytes_fail() {
        assert!(matches!(
            detect_objects_in_bytes(b"definitely not an image", &EdgeParams::default()),
            Err(TilingError::Decode(_))
        ));
    }
}
