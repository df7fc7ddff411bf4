//! Latent raster codec.
//!
//! A latent vector is written into the raw RGB bytes of a raster, row-major,
//! three bytes per pixel:
//!
//! ```text
//! "LTNT" | dim u16 LE | dim x f32 LE | fill
//! ```
//!
//! The fill bytes after the payload paint a flat colour derived from the
//! first latent components so corpora are visually distinguishable. Any
//! crop or resize destroys the header, and decoding then fails.

use image::Rgb;

use crate::adapter::Raster;

pub const LATENT_MAGIC: &[u8; 4] = b"LTNT";
const HEADER: usize = 6;

/// Bytes needed to hold a latent of `dim` components.
pub fn payload_len(dim: usize) -> usize {
    HEADER + 4 * dim
}

pub fn fits(size: (u32, u32), dim: usize) -> bool {
    dim <= u16::MAX as usize && (size.0 as usize) * (size.1 as usize) * 3 >= payload_len(dim)
}

fn fill_colour(latent: &[f32]) -> Rgb<u8> {
    let c = |i: usize| {
        let v = latent.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        (127.5 + 127.5 * v).round() as u8
    };
    Rgb([c(0), c(1), c(2)])
}

/// Renders `latent` into a raster of `size`. Returns `None` when it does not fit.
pub fn encode_latent(latent: &[f32], size: (u32, u32)) -> Option<Raster> {
    if !fits(size, latent.len()) {
        return None;
    }
    let mut img = Raster::from_pixel(size.0, size.1, fill_colour(latent));
    let buf: &mut [u8] = &mut img;
    buf[..4].copy_from_slice(LATENT_MAGIC);
    buf[4..6].copy_from_slice(&(latent.len() as u16).to_le_bytes());
    for (i, v) in latent.iter().enumerate() {
        let o = HEADER + 4 * i;
        buf[o..o + 4].copy_from_slice(&v.to_le_bytes());
    }
    Some(img)
}

/// Reads a latent back; `None` unless the raster carries a complete, finite payload.
pub fn decode_latent(img: &Raster) -> Option<Vec<f32>> {
    let buf: &[u8] = img.as_raw();
    if buf.len() < HEADER || &buf[..4] != LATENT_MAGIC {
        return None;
    }
    let dim = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    if buf.len() < payload_len(dim) {
        return None;
    }
    let v: Vec<f32> = (0..dim)
        .map(|i| {
            let o = HEADER + 4 * i;
            f32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"))
        })
        .collect();
    v.iter().all(|x| x.is_finite()).then_some(v)
}
