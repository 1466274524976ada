//! Text-guided inpainting with the branch attached.
//!
//! Deterministic DDIM sampling with classifier-free guidance. After every
//! step the unmasked latents are reset to the original latent noised to the
//! next timestep, and the decoded image is pasted over the original so that
//! pixels outside the mask come back unchanged.

use std::time::Instant;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::branch::{BranchInput, PreservationScale};
use crate::error::{PainterError, Result};
use crate::losses::actual_token_indices;
use crate::maskgen::resize_mask;
use crate::model::Models;
use crate::nn::{FeatureMap, Resample};
use crate::raster::BinaryMask;
use crate::vae::FACTOR;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub local_prompt: String,
    pub negative_prompt: String,
    pub steps: usize,
    pub guidance: f64,
    pub w: PreservationScale,
    pub seed: u64,
}

impl InpaintRequest {
    pub fn new(image: RgbImage, mask: BinaryMask, local_prompt: impl Into<String>) -> Self {
        Self {
            image,
            mask,
            local_prompt: local_prompt.into(),
            negative_prompt: String::new(),
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            w: PreservationScale::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.image.height() as usize, self.image.width() as usize);
        if self.mask.dims() != dims {
            return Err(PainterError::shape(format!("mask {:?} vs image {dims:?}", self.mask.dims())));
        }
        if self.steps == 0 {
            return Err(PainterError::domain("steps must be >= 1"));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(PainterError::domain(format!("guidance = {} must be >= 0", self.guidance)));
        }
        Ok(())
    }

    pub fn settings(&self) -> InpaintSettings {
        InpaintSettings {
            prompt: self.local_prompt.clone(),
            negative_prompt: self.negative_prompt.clone(),
            steps: self.steps,
            guidance: self.guidance,
            w: self.w.get(),
            seed: self.seed,
        }
    }
}

/// Request parameters echoed back with a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintSettings {
    pub prompt: String,
    pub negative_prompt: String,
    pub steps: usize,
    pub guidance: f64,
    pub w: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResult {
    pub image: RgbImage,
    pub seconds: f64,
    pub settings: InpaintSettings,
}

/// Anything that can serve an inpainting request.
pub trait Inpainter: Send + Sync {
    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResult>;

    fn preset(&self) -> &str;
}

impl Inpainter for Models {
    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResult> {
        inpaint(req, self)
    }

    fn preset(&self) -> &str {
        self.preset.as_str()
    }
}

/// Returns the input image untouched. Useful for exercising harnesses.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityInpainter;

impl Inpainter for IdentityInpainter {
    fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResult> {
        req.validate()?;
        Ok(InpaintResult {
            image: req.image.clone(),
            seconds: 0.0,
            settings: req.settings(),
        })
    }

    fn preset(&self) -> &str {
        "identity"
    }
}

/// `m·generated + (1−m)·original`, per pixel.
pub fn blend_preserve(generated: &RgbImage, original: &RgbImage, m: &BinaryMask) -> Result<RgbImage> {
    if generated.dimensions() != original.dimensions() || m.dims() != (original.height() as usize, original.width() as usize) {
        return Err(PainterError::shape(format!(
            "generated {:?}, original {:?}, mask {:?}",
            generated.dimensions(),
            original.dimensions(),
            m.dims()
        )));
    }
    Ok(RgbImage::from_fn(original.width(), original.height(), |x, y| {
        if m.get(y as usize, x as usize) {
            *generated.get_pixel(x, y)
        } else {
            *original.get_pixel(x, y)
        }
    }))
}

/// Pixel multiple the network needs: the autoencoder factor times one
/// halving per downsampling layer.
fn size_multiple(models: &Models) -> usize {
    let downs = models.net.spec.layers.iter().filter(|l| l.resample == Resample::Down).count();
    FACTOR << downs
}

fn pad_image(img: &RgbImage, h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        *img.get_pixel(x.min(img.width() - 1), y.min(img.height() - 1))
    })
}

fn pad_mask(m: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    BinaryMask::from_fn(h, w, |y, x| y < m.height() && x < m.width() && m.get(y, x))
}

fn gaussian(rng: &mut ChaCha8Rng, like: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(like.h, like.w, Array2::from_shape_simple_fn(like.data.raw_dim(), || StandardNormal.sample(&mut *rng)))
}

pub fn inpaint(req: &InpaintRequest, models: &Models) -> Result<InpaintResult> {
    req.validate()?;
    let start = Instant::now();
    let (h0, w0) = (req.image.height() as usize, req.image.width() as usize);
    if h0 == 0 || w0 == 0 {
        return Err(PainterError::shape("empty image"));
    }
    let mult = size_multiple(models);
    let (h, w) = (h0.div_ceil(mult) * mult, w0.div_ceil(mult) * mult);
    let image = pad_image(&req.image, h, w);
    let mask = pad_mask(&req.mask, h, w)?;

    let vae = &models.vae;
    let sched = &models.sched;
    let z0 = vae.encode(&image)?;
    let z0_masked = vae.encode_masked(&image, &mask)?;
    let m = resize_mask(&mask, z0.h, z0.w)?;
    let m_flat = m.0.clone().into_shape_with_order((1, z0.pixels())).map_err(|e| PainterError::shape(e.to_string()))?;
    let keep = m_flat.mapv(|v| 1.0 - v);

    let (cond_tokens, cond_ctx) = models.text.encode(&req.local_prompt);
    let (_, uncond_ctx) = models.text.encode(&req.negative_prompt);
    let conditional = actual_token_indices(&cond_tokens).is_ok();

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let noise = gaussian(&mut rng, &z0)?;
    let blend = |z: &Array2<f64>, t: usize| -> Result<Array2<f64>> {
        let (a, s) = sched.coeffs_or_clean(t)?;
        Ok(z * &m_flat + &((&z0.data * a + &noise.data * s) * &keep))
    };

    let ts = sched.sampling_timesteps(req.steps);
    let mut z = blend(&noise.data, ts[0])?;
    for (i, &t) in ts.iter().enumerate() {
        let t_next = ts.get(i + 1).copied().unwrap_or(0);
        let z_t = FeatureMap::new(z0.h, z0.w, z.clone())?;
        let input = BranchInput::new(z_t, z0_masked.clone(), m.clone())?;
        let predict = |ctx: &Array2<f64>| -> Result<Array2<f64>> { Ok(models.net.forward_joint(&input, t, ctx, req.w)?.pred.data) };
        let eps = if !conditional || req.guidance == 0.0 {
            predict(&uncond_ctx)?
        } else {
            let uncond = predict(&uncond_ctx)?;
            let cond = predict(&cond_ctx)?;
            &uncond + &((&cond - &uncond) * req.guidance)
        };
        let (a, s) = sched.coeffs_or_clean(t)?;
        let (a_next, s_next) = sched.coeffs_or_clean(t_next)?;
        // toy latents live in [-1, 1]
        let x0 = ((&z - &(&eps * s)) / a).mapv(|v| v.clamp(-1.0, 1.0));
        z = blend(&(x0 * a_next + eps * s_next), t_next)?;
    }
    let decoded = vae.decode(&FeatureMap::new(z0.h, z0.w, z)?)?;
    let cropped = RgbImage::from_fn(w0 as u32, h0 as u32, |x, y| *decoded.get_pixel(x, y));
    let out = blend_preserve(&cropped, &req.image, &req.mask)?;
    Ok(InpaintResult {
        image: out,
        seconds: start.elapsed().as_secs_f64(),
        settings: req.settings(),
    })
}

/// Fill an image with a flat colour; handy for request fixtures.
pub fn flat_image(height: u32, width: u32, rgb: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb(rgb))
}
