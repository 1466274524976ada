//! Toy autoencoder: 8×8 block means in, nearest-neighbour blocks out.
//!
//! Latent channels are the block means of R, G, B (scaled to `[-1, 1]`)
//! followed by the block mean of luma. Decoding ignores the luma channel.
//! `encode(decode(z)) == z` holds exactly for latents whose fourth channel
//! is the luma of the first three, and `decode(encode(x)) == x` for
//! block-constant images.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{PainterError, Result};
use crate::nn::FeatureMap;
use crate::raster::BinaryMask;

pub const FACTOR: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ToyVae;

impl ToyVae {
    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % FACTOR != 0 || width % FACTOR != 0 || height == 0 || width == 0 {
            return Err(PainterError::shape(format!(
                "image {height}x{width} is not a positive multiple of {FACTOR}"
            )));
        }
        Ok((height / FACTOR, width / FACTOR))
    }

    pub fn encode(&self, img: &RgbImage) -> Result<FeatureMap> {
        self.encode_with(img, |_, _| false)
    }

    /// Encode with pixels under `mask` set to 0 (mid-grey) in unit space.
    pub fn encode_masked(&self, img: &RgbImage, mask: &BinaryMask) -> Result<FeatureMap> {
        if mask.dims() != (img.height() as usize, img.width() as usize) {
            return Err(PainterError::shape(format!(
                "mask {:?} vs image {}x{}",
                mask.dims(),
                img.height(),
                img.width()
            )));
        }
        self.encode_with(img, |y, x| mask.get(y, x))
    }

    fn encode_with(&self, img: &RgbImage, hole: impl Fn(usize, usize) -> bool) -> Result<FeatureMap> {
        let (h, w) = self.latent_dims(img.height() as usize, img.width() as usize)?;
        let mut data = Array2::zeros((LATENT_CHANNELS, h * w));
        let norm = 1.0 / (FACTOR * FACTOR) as f64;
        for by in 0..h {
            for bx in 0..w {
                let mut acc = [0.0f64; 3];
                for y in 0..FACTOR {
                    for x in 0..FACTOR {
                        let (py, px) = (by * FACTOR + y, bx * FACTOR + x);
                        if hole(py, px) {
                            continue;
                        }
                        let p = img.get_pixel(px as u32, py as u32);
                        for c in 0..3 {
                            acc[c] += to_unit(p[c]);
                        }
                    }
                }
                let j = by * w + bx;
                let mut luma = 0.0;
                for c in 0..3 {
                    data[[c, j]] = acc[c] * norm;
                    luma += LUMA[c] * data[[c, j]];
                }
                data[[3, j]] = luma;
            }
        }
        FeatureMap::new(h, w, data)
    }

    pub fn decode(&self, z: &FeatureMap) -> Result<RgbImage> {
        if z.channels() != LATENT_CHANNELS {
            return Err(PainterError::shape(format!("latent has {} channels", z.channels())));
        }
        let (h, w) = (z.h * FACTOR, z.w * FACTOR);
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let j = (y as usize / FACTOR) * z.w + x as usize / FACTOR;
            Rgb([to_byte(z.data[[0, j]]), to_byte(z.data[[1, j]]), to_byte(z.data[[2, j]])])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_constant_images_round_trip() {
        let img = RgbImage::from_fn(32, 16, |x, y| {
            let (bx, by) = (x / 8, y / 8);
            Rgb([(bx * 60) as u8, (by * 90 + 10) as u8, ((bx + by) * 40) as u8])
        });
        let vae = ToyVae;
        let z = vae.encode(&img).unwrap();
        assert_eq!(z.shape(), (4, 2, 4));
        assert_eq!(vae.decode(&z).unwrap(), img);
        assert!(vae.encode(&RgbImage::new(12, 16)).is_err());

        let hole = BinaryMask::from_fn(16, 32, |_, x| x < 8).unwrap();
        let zm = vae.encode_masked(&img, &hole).unwrap();
        for c in 0..4 {
            assert_eq!(zm.data[[c, 0]], 0.0);
            assert_eq!(zm.data[[c, 4]], 0.0);
            assert_eq!(zm.data[[c, 1]], z.data[[c, 1]]);
        }
    }
}
