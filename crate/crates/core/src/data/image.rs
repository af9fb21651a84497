//! Raster loading and normalization into ink-positive, 16-aligned tensors.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encoder input extents must be multiples of this.
pub const PAD_MULTIPLE: usize = 16;
pub const DEFAULT_SIZE_CAP: usize = 256;

/// A normalized image: `pixels` is `[H, W]` with both extents multiples of
/// [`PAD_MULTIPLE`], ink toward 1, background and padding exactly 0. `content`
/// holds the extents of the real image inside the padded canvas (top-left aligned).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub pixels: Tensor,
    pub content: (usize, usize),
}

impl PreparedImage {
    pub fn height(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(1)
    }
}

pub fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple) * multiple
}

/// Extents after capping the longest side at `cap`, preserving aspect ratio.
pub fn capped_extents(h: usize, w: usize, cap: Option<usize>) -> (usize, usize) {
    match cap {
        Some(cap) if h.max(w) > cap => {
            let scale = cap as f64 / h.max(w) as f64;
            let nh = ((h as f64 * scale).round() as usize).clamp(1, cap);
            let nw = ((w as f64 * scale).round() as usize).clamp(1, cap);
            (nh, nw)
        }
        _ => (h, w),
    }
}

/// Normalizes an 8-bit grayscale raster: inverts light-background images so ink is
/// near 1, scales to `[0, 1]`, downsizes so the longest side is at most `cap`, then
/// zero-pads bottom and right to multiples of 16.
pub fn preprocess(raster: &GrayImage, cap: Option<usize>) -> Result<PreparedImage> {
    let (w, h) = raster.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Input("empty image".into()));
    }
    let (w, h) = (w as usize, h as usize);
    let values: Vec<f32> = raster.as_raw().iter().map(|&p| f32::from(p) / 255.0).collect();
    let border_mean = {
        let mut total = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    total += f64::from(values[y * w + x]);
                    count += 1;
                }
            }
        }
        total / count as f64
    };
    let ink: Vec<f32> = if border_mean > 0.5 {
        values.iter().map(|v| 1.0 - v).collect()
    } else {
        values
    };
    let (nh, nw) = capped_extents(h, w, cap);
    let ink = if (nh, nw) != (h, w) {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, ink).expect("buffer size matches");
        imageops::resize(&buf, nw as u32, nh as u32, FilterType::Triangle).into_raw()
    } else {
        ink
    };
    let (ph, pw) = (round_up(nh, PAD_MULTIPLE), round_up(nw, PAD_MULTIPLE));
    let mut padded = vec![0.0; ph * pw];
    for y in 0..nh {
        for x in 0..nw {
            padded[y * pw + x] = f64::from(ink[y * nw + x]).clamp(0.0, 1.0);
        }
    }
    Ok(PreparedImage {
        pixels: Tensor::new([ph, pw], padded)?,
        content: (nh, nw),
    })
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_raster(path: impl AsRef<Path>, raster: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    raster.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders ink-positive values as dark ink on white paper.
pub fn ink_to_raster(height: usize, width: usize, ink: &[f64]) -> GrayImage {
    let px = ink
        .iter()
        .map(|v| (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8)
        .collect();
    GrayImage::from_raw(width as u32, height as u32, px).expect("buffer size matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_paper_becomes_zeros() {
        let white = GrayImage::from_pixel(30, 20, Luma([255]));
        let p = preprocess(&white, None).unwrap();
        assert!(p.pixels.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.pixels.shape(), &[32, 32]);
        assert_eq!(p.content, (20, 30));
    }

    #[test]
    fn dark_ink_maps_toward_one() {
        let mut img = GrayImage::from_pixel(16, 16, Luma([255]));
        img.put_pixel(3, 4, Luma([0]));
        let p = preprocess(&img, None).unwrap();
        assert_eq!(p.pixels.data()[4 * 16 + 3], 1.0);
    }

    #[test]
    fn dark_background_is_not_inverted() {
        let mut img = GrayImage::from_pixel(16, 16, Luma([0]));
        img.put_pixel(5, 5, Luma([255]));
        let p = preprocess(&img, None).unwrap();
        assert_eq!(p.pixels.data()[5 * 16 + 5], 1.0);
        assert_eq!(p.pixels.data()[0], 0.0);
    }

    #[test]
    fn resize_then_pad() {
        // 100 rows x 300 columns, cap 256: 300 -> 256 and 100 -> round(85.33) = 85,
        // then padded to 96 x 256.
        let img = GrayImage::from_pixel(300, 100, Luma([255]));
        let p = preprocess(&img, Some(256)).unwrap();
        assert_eq!(p.content, (85, 256));
        assert_eq!(p.pixels.shape(), &[96, 256]);
    }

    #[test]
    fn extents_are_always_aligned() {
        for (h, w) in [(1, 1), (17, 33), (64, 15), (255, 2)] {
            let img = GrayImage::from_pixel(w, h, Luma([200]));
            let p = preprocess(&img, Some(256)).unwrap();
            assert_eq!(p.height() % 16, 0);
            assert_eq!(p.width() % 16, 0);
        }
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = GrayImage::new(0, 0);
        assert!(preprocess(&img, None).is_err());
    }
}
