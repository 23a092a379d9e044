//! PNG decoding, preprocessing to 64 x 64 tensors, and PNG output.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use pdt_core::data::{rgb_to_tensor, tensor_to_rgb};
use pdt_core::networks::IMAGE_SIDE;
use pdt_core::Tensor;

/// Content size after scaling the longer side of `w x h` to `side`.
pub fn fitted_size(w: u32, h: u32, side: u32) -> (u32, u32) {
    if w >= h {
        (side, ((h as f64 * side as f64 / w as f64).round() as u32).clamp(1, side))
    } else {
        (((w as f64 * side as f64 / h as f64).round() as u32).clamp(1, side), side)
    }
}

/// Resize (bilinear) so the longer side is 64 keeping the aspect ratio,
/// center on a white 64 x 64 square, and scale to [-1, 1].
pub fn preprocess_image(raw: &RgbImage) -> Result<Tensor<f32>> {
    let (w, h) = raw.dimensions();
    if w == 0 || h == 0 {
        bail!("image has zero size {w}x{h}");
    }
    let side = IMAGE_SIDE as u32;
    let squared = if (w, h) == (side, side) {
        raw.clone()
    } else {
        let (cw, ch) = fitted_size(w, h, side);
        let content = imageops::resize(raw, cw, ch, FilterType::Triangle);
        let mut canvas = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
        imageops::replace(&mut canvas, &content, ((side - cw) / 2) as i64, ((side - ch) / 2) as i64);
        canvas
    };
    Ok(rgb_to_tensor(squared.as_raw())?)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).with_context(|| format!("cannot decode image {}", path.display()))?;
    preprocess_image(&img.to_rgb8()).with_context(|| format!("cannot preprocess {}", path.display()))
}

/// Write a `3 x 64 x 64` tensor in [-1, 1] as an 8-bit RGB PNG.
pub fn save_tensor_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let side = IMAGE_SIDE as u32;
    let rgb = tensor_to_rgb(t)?;
    save_rgb_png(rgb, side, path)
}

pub fn save_rgb_png(rgb: Vec<u8>, side: u32, path: &Path) -> Result<()> {
    let img = RgbImage::from_raw(side, side, rgb).context("pixel buffer does not match image size")?;
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landscape_is_padded_top_and_bottom() {
        let raw = RgbImage::from_pixel(128, 96, Rgb([0, 0, 0]));
        let t = preprocess_image(&raw).unwrap();
        assert_eq!(t.shape(), &[3, 64, 64]);
        assert_eq!(fitted_size(128, 96, 64), (64, 48));
        let px = |c: usize, y: usize, x: usize| t.data()[c * 4096 + y * 64 + x];
        assert_eq!(px(0, 0, 10), 1.0);
        assert_eq!(px(0, 63, 10), 1.0);
        assert_eq!(px(1, 32, 32), -1.0);
        assert_eq!(px(2, 8, 0), -1.0);
        assert_eq!(px(2, 7, 0), 1.0);
        assert_eq!(px(2, 56, 0), 1.0);
        assert_eq!(px(2, 55, 0), -1.0);
    }

    #[test]
    fn exact_size_is_untouched() {
        let raw = RgbImage::from_fn(64, 64, |x, y| Rgb([x as u8 * 4, y as u8 * 4, 7]));
        let t = preprocess_image(&raw).unwrap();
        assert_eq!(tensor_to_rgb(&t).unwrap(), raw.into_raw());
    }
}
