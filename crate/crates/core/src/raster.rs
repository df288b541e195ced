//! 8-bit raster helpers: PNG codec, grayscale conversion, masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(img.to_luma8())
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray_png(&bytes)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes = encode_gray_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Luma with BT.601 weights, as f64 on the 0..255 scale.
pub fn to_gray_f64(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|Rgb([r, g, b])| 0.299 * *r as f64 + 0.587 * *g as f64 + 0.114 * *b as f64)
        .collect()
}

pub fn solid(width: u32, height: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(color))
}

/// Expands a single-channel image to RGB by channel replication.
pub fn gray_to_rgb(img: &GrayImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let Luma([v]) = *img.get_pixel(x, y);
        Rgb([v, v, v])
    })
}

/// Zeroes every pixel whose mask value is 0. Mask values are {0, 1}.
pub fn apply_mask(img: &RgbImage, mask: &GrayImage) -> Result<RgbImage> {
    if img.dimensions() != mask.dimensions() {
        return Err(Error::invalid(format!(
            "mask {:?} does not match image {:?}",
            mask.dimensions(),
            img.dimensions()
        )));
    }
    let mut out = img.clone();
    for (p, m) in out.pixels_mut().zip(mask.pixels()) {
        if m[0] == 0 {
            *p = Rgb([0, 0, 0]);
        }
    }
    Ok(out)
}

/// Horizontal mirror.
pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([x as u8 * 30, y as u8 * 40, 7]));
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_zeroes_background() {
        let img = solid(2, 1, [9, 9, 9]);
        let mask = GrayImage::from_raw(2, 1, vec![1, 0]).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [9, 9, 9]);
        assert_eq!(out.get_pixel(1, 0).0, [0, 0, 0]);
        assert!(apply_mask(&img, &GrayImage::new(1, 1)).is_err());
    }

    #[test]
    fn gray_weights() {
        let g = to_gray_f64(&solid(1, 1, [255, 255, 255]));
        assert!((g[0] - 255.0).abs() < 1e-9);
    }
}
