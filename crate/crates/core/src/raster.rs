//! Raster types shared across the toolkit.
//!
//! Masks use the polarity `1 = region to inpaint` everywhere. On disk they are
//! 8-bit grayscale PNGs with `255 = inpaint`, `0 = keep`.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
pub use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};

/// Axis-aligned pixel rectangle with inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    /// Grow each side by the given pixel counts, clipped to an `h`×`w` frame.
    pub fn grow(&self, top: usize, bottom: usize, left: usize, right: usize, h: usize, w: usize) -> BBox {
        BBox {
            y0: self.y0.saturating_sub(top),
            x0: self.x0.saturating_sub(left),
            y1: (self.y1 + bottom).min(h - 1),
            x1: (self.x1 + right).min(w - 1),
        }
    }

    /// Grow every side by `frac` of the box's own side length (rounded).
    pub fn pad_fraction(&self, frac: f64, h: usize, w: usize) -> BBox {
        let py = (frac * self.height() as f64).round() as usize;
        let px = (frac * self.width() as f64).round() as usize;
        self.grow(py, py, px, px, h, w)
    }
}

/// Hard binary mask, row-major, every value exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0)
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 1)
    }

    fn filled(height: usize, width: usize, v: u8) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PainterError::domain(format!("mask dims must be >= 1, got {height}x{width}")));
        }
        Ok(Self {
            height,
            width,
            pixels: vec![v; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PainterError::domain(format!("mask dims must be >= 1, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(PainterError::shape(format!(
                "mask buffer has {} values, expected {}",
                pixels.len(),
                height * width
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(PainterError::domain("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut m = Self::zeros(height, width)?;
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    m.pixels[y * width + x] = 1;
                }
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.pixels[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    /// Bounding box of the nonzero pixels, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            let row = &self.pixels[y * self.width..(y + 1) * self.width];
            let Some(first) = row.iter().position(|&p| p != 0) else {
                continue;
            };
            let last = row.iter().rposition(|&p| p != 0).unwrap_or(first);
            bb = Some(match bb {
                None => BBox { y0: y, x0: first, y1: y, x1: last },
                Some(b) => BBox {
                    y0: b.y0,
                    x0: b.x0.min(first),
                    y1: y,
                    x1: b.x1.max(last),
                },
            });
        }
        bb
    }

    /// True when every set pixel of `other` is also set here.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims()
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(&a, &b)| a >= b)
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.pixels.iter_mut().zip(&other.pixels) {
            *a |= b;
        }
    }

    pub fn nonzero_points(&self) -> Vec<(usize, usize)> {
        self.pixels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != 0)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels at or above 128 count as inpaint.
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x| img.get_pixel(x as u32, y as u32)[0] >= 128)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Self::from_gray(&img.to_luma8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| PainterError::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PainterError::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask(Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.pixels[y * self.width + x] as f64
        }))
    }
}

/// Real-valued mask with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(pub Array2<f64>);

impl SoftMask {
    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    /// Row-major flattening, matching the pixel order of feature maps.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| PainterError::io(path, e))?;
    decode_png_rgb(&bytes)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_png_rgb(img)?;
    std::fs::write(path, bytes).map_err(|e| PainterError::io(path, e))
}

pub fn crop_rgb(img: &RgbImage, bb: BBox) -> RgbImage {
    image::imageops::crop_imm(img, bb.x0 as u32, bb.y0 as u32, bb.width() as u32, bb.height() as u32).to_image()
}
