//! Attention maps drawn over the input image.

use densemath::data::PreparedImage;
use densemath::Tensor;
use image::{Rgb, RgbImage};

/// Weight of the attention colour when blended over the input.
pub const OPACITY: f64 = 0.6;

/// Upsamples `alpha` (an `[h, w]` grid covering the padded canvas) to the image
/// resolution by nearest neighbour, scales it by its maximum and blends it in red
/// over the grayscale input. The result is cropped to the image content.
pub fn overlay(image: &PreparedImage, alpha: &Tensor) -> RgbImage {
    let (ah, aw) = (alpha.dim(0), alpha.dim(1));
    let (ph, pw) = (image.height(), image.width());
    let (ch, cw) = image.content;
    let peak = alpha.data().iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let px = image.pixels.data();
    RgbImage::from_fn(cw as u32, ch as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let a = alpha.data()[(y * ah / ph) * aw + x * aw / pw] * scale;
        let gray = 1.0 - px[y * pw + x];
        let blend = |heat: f64| (((1.0 - OPACITY * a) * gray + OPACITY * a * heat) * 255.0).round() as u8;
        Rgb([blend(1.0), blend(0.0), blend(0.0)])
    })
}
