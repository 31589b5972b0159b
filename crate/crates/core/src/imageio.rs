//! Grayscale PNG round-trips for scene and annotation files.
//!
//! Files hold 8-bit channels; all in-memory math uses unit-interval f64.
//! Saving quantizes with round-half-up so save/load is a fixed point.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex_string;
use crate::tensor::Tensor;

/// Quantize a unit-interval value to the 8-bit grid it will be stored on.
pub fn quantize(v: f64) -> f64 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    q as f64 / 255.0
}

pub fn quantize_image(img: &Tensor) -> Tensor {
    img.map(quantize)
}

/// Save a `[H,W]` unit-interval tensor as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (img.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[h, w], data))
}

/// Save a binary `[H,W]` mask (nonzero -> 255).
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    save_gray(path, &mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(load_gray(path)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
}

/// Content hash of an image's quantized pixel grid.
pub fn image_hash(img: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in img.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    hex_string(&h.finalize())
}

pub fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Argument(format!(
            "{what}: expected shape {:?}, got {:?}",
            shape,
            t.shape()
        )));
    }
    Ok(())
}
