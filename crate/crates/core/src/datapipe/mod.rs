//! Dataset construction: object crops, local prompts, shard writing and
//! benchmark loading.
//!
//! On-disk layout of a shard or benchmark directory:
//!
//! ```text
//! manifest.jsonl        one JSON object per record
//! images/<id>.png       RGB image
//! masks/<id>_seg.png    segmentation mask (255 = object)
//! masks/<id>_eval.png   mask to inpaint (optional; defaults to seg)
//! stats.json            build statistics (shards only)
//! ```

pub mod bench;
pub mod clients;
pub mod shard;

use std::fmt;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};
use crate::maskgen::MaskKind;
use crate::raster::{crop_rgb, BinaryMask};

pub use bench::{load_bench, Bench};
pub use clients::{CaptionerClient, PromptClients, ShortenerClient, SimilarityClient};
pub use shard::{build_shard, load_sources, write_sources, ShardConfig, ShardStats};

pub const MANIFEST: &str = "manifest.jsonl";
/// Crop padding per side for captioning.
pub const DEFAULT_CROP_PAD: f64 = 0.1;
/// Similarity a local prompt must exceed to be kept.
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Human,
    Animal,
    Cartoon,
    Indoor,
    Outdoor,
    #[default]
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Human,
        Category::Animal,
        Category::Cartoon,
        Category::Indoor,
        Category::Outdoor,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Human => "human",
            Category::Animal => "animal",
            Category::Cartoon => "cartoon",
            Category::Indoor => "indoor",
            Category::Outdoor => "outdoor",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest line. Asset paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub seg_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mask: Option<String>,
    #[serde(default)]
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<MaskKind>,
    #[serde(default)]
    pub category: Category,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| PainterError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| PainterError::schema(None, format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, out).map_err(|e| PainterError::io(&path, e))
}

/// An image with its segmentation mask, before prompts are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub id: String,
    pub image: RgbImage,
    pub seg_mask: BinaryMask,
    pub category: Category,
}

/// The unit of training shards and benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub id: String,
    pub image: RgbImage,
    pub seg_mask: BinaryMask,
    pub eval_mask: BinaryMask,
    pub local_prompt: String,
    pub kind: Option<MaskKind>,
    pub category: Category,
}

impl BenchRecord {
    pub fn validate(&self) -> Result<()> {
        let dims = (self.image.height() as usize, self.image.width() as usize);
        if self.seg_mask.dims() != dims || self.eval_mask.dims() != dims {
            return Err(PainterError::schema(
                Some(&self.id),
                format!(
                    "image is {}x{} but masks are {:?} and {:?}",
                    dims.0,
                    dims.1,
                    self.seg_mask.dims(),
                    self.eval_mask.dims()
                ),
            ));
        }
        if self.local_prompt.trim().is_empty() {
            return Err(PainterError::schema(Some(&self.id), "empty local prompt"));
        }
        Ok(())
    }
}

/// Image cropped to the mask's bounding box grown by `pad_frac` per side.
pub fn crop_object(image: &RgbImage, seg_mask: &BinaryMask, pad_frac: f64) -> Result<RgbImage> {
    let dims = (image.height() as usize, image.width() as usize);
    if seg_mask.dims() != dims {
        return Err(PainterError::shape(format!("mask {:?} vs image {dims:?}", seg_mask.dims())));
    }
    let bb = seg_mask.bbox().ok_or(PainterError::EmptyMask)?;
    Ok(crop_rgb(image, bb.pad_fraction(pad_frac, dims.0, dims.1)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub crop_pad: f64,
    pub threshold: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            crop_pad: DEFAULT_CROP_PAD,
            threshold: DEFAULT_SIM_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptOutcome {
    Accepted { prompt: String, score: f64 },
    Rejected { prompt: String, score: f64 },
}

impl PromptOutcome {
    pub fn accepted(&self) -> Option<&str> {
        match self {
            PromptOutcome::Accepted { prompt, .. } => Some(prompt),
            PromptOutcome::Rejected { .. } => None,
        }
    }
}

/// Crop → caption → shorten → score; kept only when the score strictly
/// exceeds the threshold.
pub fn make_local_prompt(
    image: &RgbImage,
    seg_mask: &BinaryMask,
    clients: &PromptClients<'_>,
    cfg: PromptConfig,
) -> Result<PromptOutcome> {
    if !(-1.0..=1.0).contains(&cfg.threshold) {
        return Err(PainterError::domain(format!("threshold {} outside [-1, 1]", cfg.threshold)));
    }
    let crop = crop_object(image, seg_mask, cfg.crop_pad)?;
    let caption = clients.captioner.caption(&crop)?;
    let prompt = clients.shortener.shorten(&caption)?.trim().to_owned();
    if prompt.is_empty() {
        return Err(PainterError::client("shortener returned an empty prompt"));
    }
    let score = clients.similarity.score(&crop, &prompt)?;
    Ok(if score > cfg.threshold {
        PromptOutcome::Accepted { prompt, score }
    } else {
        PromptOutcome::Rejected { prompt, score }
    })
}

#[cfg(test)]
mod tests {
    use super::clients::*;
    use super::*;
    use image::Rgb;

    fn scene() -> (RgbImage, BinaryMask) {
        let img = RgbImage::from_fn(64, 48, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, 7]));
        let m = BinaryMask::from_fn(48, 64, |y, x| (10..=20).contains(&y) && (30..=50).contains(&x) && (x + y) % 2 == 0).unwrap();
        (img, m)
    }

    #[test]
    fn crop_examples() {
        let (img, _) = scene();
        let full = BinaryMask::ones(48, 64).unwrap();
        assert_eq!(crop_object(&img, &full, 0.0).unwrap(), img);
        let one = BinaryMask::from_fn(48, 64, |y, x| y == 7 && x == 9).unwrap();
        let c = crop_object(&img, &one, 0.0).unwrap();
        assert_eq!(c.dimensions(), (1, 1));
        assert_eq!(c.get_pixel(0, 0), img.get_pixel(9, 7));
        assert!(matches!(crop_object(&img, &BinaryMask::zeros(48, 64).unwrap(), 0.1), Err(PainterError::EmptyMask)));
    }

    #[test]
    fn crop_matches_bbox_scan() {
        let (img, m) = scene();
        // brute-force scan for the extent
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..48 {
            for x in 0..64 {
                if m.get(y, x) {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        let (bh, bw) = ((y1 - y0 + 1) as f64, (x1 - x0 + 1) as f64);
        let (py, px) = ((0.1 * bh).round() as usize, (0.1 * bw).round() as usize);
        let (cy0, cx0) = (y0 - py, x0 - px);
        let (cy1, cx1) = ((y1 + py).min(47), (x1 + px).min(63));
        let c = crop_object(&img, &m, 0.1).unwrap();
        assert_eq!(c.dimensions(), ((cx1 - cx0 + 1) as u32, (cy1 - cy0 + 1) as u32));
        assert_eq!(c.get_pixel(0, 0), img.get_pixel(cx0 as u32, cy0 as u32));
    }

    fn outcome(score: f64) -> PromptOutcome {
        let (img, m) = scene();
        let clients = PromptClients {
            captioner: &FixedCaptioner("a small red kite".into()),
            shortener: &IdentityShortener,
            similarity: &FixedSimilarity(score),
        };
        make_local_prompt(&img, &m, &clients, PromptConfig::default()).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(outcome(0.25).accepted(), Some("a small red kite"));
        assert_eq!(outcome(0.21).accepted(), Some("a small red kite"));
        assert_eq!(outcome(0.20).accepted(), None);
        assert_eq!(outcome(0.19).accepted(), None);
    }
}
