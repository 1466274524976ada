//! Benchmark runner: inpaint every record with fixed settings, then score
//! global and local text–image similarity, detector agreement and optional
//! reward/aesthetic plugins.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::branch::PreservationScale;
use crate::datapipe::{crop_object, BenchRecord, Category, SimilarityClient};
use crate::datapipe::clients::dominant_color;
use crate::error::{PainterError, Result};
use crate::par::Execution;
use crate::pipeline::{InpaintRequest, Inpainter, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::raster::{BBox, BinaryMask};

pub const DEFAULT_LOCAL_PAD: f64 = 0.05;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub phrase: String,
    pub confidence: f64,
}

/// Open-vocabulary detector.
pub trait DetectorClient: Send + Sync {
    fn detect(&self, image: &RgbImage, text: &str) -> Result<Vec<Detection>>;
}

/// Scalar image–prompt scorer (reward or aesthetic model).
pub trait ScorerClient: Send + Sync {
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64>;
}

fn whole(image: &RgbImage) -> BBox {
    BBox {
        y0: 0,
        x0: 0,
        y1: image.height().saturating_sub(1) as usize,
        x1: image.width().saturating_sub(1) as usize,
    }
}

/// Reports the query itself over the whole crop.
#[derive(Debug, Clone, Copy)]
pub struct EchoDetector(pub f64);

impl Default for EchoDetector {
    fn default() -> Self {
        Self(0.9)
    }
}

impl DetectorClient for EchoDetector {
    fn detect(&self, image: &RgbImage, text: &str) -> Result<Vec<Detection>> {
        Ok(vec![Detection {
            bbox: whole(image),
            phrase: text.to_owned(),
            confidence: self.0,
        }])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullDetector;

impl DetectorClient for NullDetector {
    fn detect(&self, _image: &RgbImage, _text: &str) -> Result<Vec<Detection>> {
        Ok(Vec::new())
    }
}

/// Finds the query only if it names the crop's dominant colour; otherwise
/// reports a generic "<colour> object".
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorDetector;

impl DetectorClient for ColorDetector {
    fn detect(&self, image: &RgbImage, text: &str) -> Result<Vec<Detection>> {
        let color = dominant_color(image);
        let named = tokens(text).iter().any(|w| w == color);
        let phrase = if named { text.to_owned() } else { format!("{color} object") };
        Ok(vec![Detection {
            bbox: whole(image),
            phrase,
            confidence: 0.8,
        }])
    }
}

/// Fixed detections per query text; unknown queries detect nothing.
#[derive(Debug, Clone, Default)]
pub struct TableDetector {
    pub table: BTreeMap<String, Vec<(String, f64)>>,
}

impl DetectorClient for TableDetector {
    fn detect(&self, image: &RgbImage, text: &str) -> Result<Vec<Detection>> {
        Ok(self
            .table
            .get(text)
            .map(|v| {
                v.iter()
                    .map(|(phrase, confidence)| Detection {
                        bbox: whole(image),
                        phrase: phrase.clone(),
                        confidence: *confidence,
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedScorer(pub f64);

impl ScorerClient for FixedScorer {
    fn score(&self, _image: &RgbImage, _prompt: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// `100 × cosine` on the full image.
pub fn clip_sim(image: &RgbImage, prompt: &str, sim: &dyn SimilarityClient) -> Result<f64> {
    Ok(100.0 * sim.score(image, prompt)?)
}

/// `100 × cosine` on the mask's bounding box grown by `pad` per side.
pub fn local_clip_sim(image: &RgbImage, mask: &BinaryMask, prompt: &str, sim: &dyn SimilarityClient, pad: f64) -> Result<f64> {
    let crop = crop_object(image, mask, pad)?;
    Ok(100.0 * sim.score(&crop, prompt)?)
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !ARTICLES.contains(&w.as_str()))
        .collect()
}

/// A detected phrase matches when it contains the prompt's final token,
/// ignoring case and articles.
pub fn phrase_matches(phrase: &str, prompt: &str) -> bool {
    match tokens(prompt).last() {
        Some(head) => tokens(phrase).iter().any(|w| w == head),
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub steps: usize,
    pub guidance: f64,
    pub w: f64,
    pub local_pad: f64,
    pub min_confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            w: 1.0,
            local_pad: DEFAULT_LOCAL_PAD,
            min_confidence: DEFAULT_MIN_CONFIDENCE,
        }
    }
}

/// Whether the detector finds the prompt in the generated region.
pub fn gdino_hit(image: &RgbImage, mask: &BinaryMask, prompt: &str, detector: &dyn DetectorClient, cfg: &EvalConfig) -> Result<bool> {
    let crop = crop_object(image, mask, cfg.local_pad)?;
    Ok(detector
        .detect(&crop, prompt)?
        .iter()
        .any(|d| d.confidence >= cfg.min_confidence && phrase_matches(&d.phrase, prompt)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdinoSummary {
    pub accuracy: f64,
    /// Records whose detector call failed; each counts as a miss.
    pub flagged: Vec<String>,
}

/// Fraction of records whose generated region is detected as the prompt.
pub fn gdino_acc(records: &[BenchRecord], images: &[RgbImage], detector: &dyn DetectorClient, cfg: &EvalConfig) -> Result<GdinoSummary> {
    if records.len() != images.len() {
        return Err(PainterError::shape(format!("{} records but {} images", records.len(), images.len())));
    }
    if records.is_empty() {
        return Ok(GdinoSummary { accuracy: 0.0, flagged: Vec::new() });
    }
    let mut hits = 0usize;
    let mut flagged = Vec::new();
    for (r, img) in records.iter().zip(images) {
        match gdino_hit(img, &r.eval_mask, &r.local_prompt, detector, cfg) {
            Ok(true) => hits += 1,
            Ok(false) => {}
            Err(e) => {
                log::warn!("record {}: detector failed: {e}", r.id);
                flagged.push(r.id.clone());
            }
        }
    }
    Ok(GdinoSummary {
        accuracy: hits as f64 / records.len() as f64,
        flagged,
    })
}

/// Clients used during scoring. IR and AS are optional plugins.
#[derive(Clone, Copy)]
pub struct EvalClients<'a> {
    pub similarity: &'a dyn SimilarityClient,
    pub detector: &'a dyn DetectorClient,
    pub reward: Option<&'a dyn ScorerClient>,
    pub aesthetic: Option<&'a dyn ScorerClient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub category: Category,
    pub ir: Option<f64>,
    #[serde(rename = "as")]
    pub aesthetic: Option<f64>,
    pub clip_sim: Option<f64>,
    pub local_clip_sim: Option<f64>,
    pub gdino_hit: bool,
    /// Failures met while producing this row.
    pub errors: Vec<String>,
}

/// Means over rows. A metric is null when no row carries it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    pub count: usize,
    pub ir: Option<f64>,
    #[serde(rename = "as")]
    pub aesthetic: Option<f64>,
    pub clip_sim: Option<f64>,
    pub local_clip_sim: Option<f64>,
    pub gdino_acc: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Aggregate {
    pub fn of(rows: &[&MetricsRow]) -> Self {
        Self {
            count: rows.len(),
            ir: mean(rows.iter().map(|r| r.ir)),
            aesthetic: mean(rows.iter().map(|r| r.aesthetic)),
            clip_sim: mean(rows.iter().map(|r| r.clip_sim)),
            local_clip_sim: mean(rows.iter().map(|r| r.local_clip_sim)),
            gdino_acc: mean(rows.iter().map(|r| Some(if r.gdino_hit { 1.0 } else { 0.0 }))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config: EvalConfig,
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
    pub per_category: BTreeMap<Category, Aggregate>,
}

impl MetricsReport {
    pub fn from_rows(seed: u64, config: EvalConfig, mut rows: Vec<MetricsRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let all: Vec<&MetricsRow> = rows.iter().collect();
        let aggregate = Aggregate::of(&all);
        let mut groups: BTreeMap<Category, Vec<&MetricsRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.category).or_default().push(r);
        }
        let per_category = groups.into_iter().map(|(c, rs)| (c, Aggregate::of(&rs))).collect();
        Self {
            seed,
            config,
            aggregate,
            per_category,
            rows,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Plain-text table: one line for the whole set, then one per category.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}"));
        let mut out = String::new();
        let header = ["Set", "N", "IR", "AS", "CLIP Sim", "Local CLIP Sim", "Gdino Acc"];
        let mut lines = vec![header.map(str::to_owned).to_vec()];
        let mut push = |name: &str, a: &Aggregate| {
            lines.push(vec![
                name.to_owned(),
                a.count.to_string(),
                cell(a.ir),
                cell(a.aesthetic),
                cell(a.clip_sim),
                cell(a.local_clip_sim),
                cell(a.gdino_acc),
            ]);
        };
        push("all", &self.aggregate);
        for (c, a) in &self.per_category {
            push(c.as_str(), a);
        }
        let widths: Vec<usize> = (0..header.len()).map(|j| lines.iter().map(|l| l[j].len()).max().unwrap_or(0)).collect();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

fn score_record(
    index: usize,
    record: &BenchRecord,
    model: &dyn Inpainter,
    clients: &EvalClients<'_>,
    cfg: &EvalConfig,
    seed: u64,
) -> MetricsRow {
    let mut row = MetricsRow {
        id: record.id.clone(),
        category: record.category,
        ir: None,
        aesthetic: None,
        clip_sim: None,
        local_clip_sim: None,
        gdino_hit: false,
        errors: Vec::new(),
    };
    let mut req = InpaintRequest::new(record.image.clone(), record.eval_mask.clone(), record.local_prompt.clone());
    req.steps = cfg.steps;
    req.guidance = cfg.guidance;
    req.seed = seed.wrapping_add(index as u64);
    let generated = match PreservationScale::new(cfg.w).and_then(|w| {
        req.w = w;
        model.inpaint(&req)
    }) {
        Ok(res) => res.image,
        Err(e) => {
            row.errors.push(format!("inpaint: {e}"));
            return row;
        }
    };
    let prompt = &record.local_prompt;
    let mut note = |what: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            row.errors.push(format!("{what}: {e}"));
            None
        }
    };
    let clip = note("clip_sim", clip_sim(&generated, prompt, clients.similarity));
    let local = note(
        "local_clip_sim",
        local_clip_sim(&generated, &record.eval_mask, prompt, clients.similarity, cfg.local_pad),
    );
    let ir = clients.reward.and_then(|c| note("ir", c.score(&generated, prompt)));
    let aesthetic = clients.aesthetic.and_then(|c| note("as", c.score(&generated, prompt)));
    row.clip_sim = clip;
    row.local_clip_sim = local;
    row.ir = ir;
    row.aesthetic = aesthetic;
    match gdino_hit(&generated, &record.eval_mask, prompt, clients.detector, cfg) {
        Ok(hit) => row.gdino_hit = hit,
        Err(e) => row.errors.push(format!("gdino: {e}")),
    }
    row
}

/// Inpaint and score every record. Record `i` is sampled with seed
/// `seed + i`; failures are recorded in the row and the run continues.
pub fn run_benchmark(
    records: &[BenchRecord],
    model: &dyn Inpainter,
    clients: &EvalClients<'_>,
    cfg: &EvalConfig,
    seed: u64,
    execution: Execution,
) -> MetricsReport {
    let rows = execution.map(records, |i, r| score_record(i, r, model, clients, cfg, seed));
    MetricsReport::from_rows(seed, *cfg, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::clients::FixedSimilarity;
    use crate::pipeline::IdentityInpainter;
    use crate::synth::bench_records;

    #[test]
    fn scales_and_crops() {
        let r = &bench_records(1, 64, 64, 1).unwrap()[0];
        assert_eq!(clip_sim(&r.image, "x", &FixedSimilarity(0.0)).unwrap(), 0.0);
        assert!((clip_sim(&r.image, "x", &FixedSimilarity(0.2612)).unwrap() - 26.12).abs() < 1e-12);
        assert!((local_clip_sim(&r.image, &r.eval_mask, "x", &FixedSimilarity(0.2267), 0.05).unwrap() - 22.67).abs() < 1e-12);
        let empty = BinaryMask::zeros(64, 64).unwrap();
        assert!(matches!(
            local_clip_sim(&r.image, &empty, "x", &FixedSimilarity(0.1), 0.05),
            Err(PainterError::EmptyMask)
        ));
    }

    #[test]
    fn phrase_rule() {
        assert!(phrase_matches("The Red Ball", "a red ball"));
        assert!(phrase_matches("ball", "the ball"));
        assert!(!phrase_matches("red", "a red ball"));
        assert!(!phrase_matches("ball", "the"));
    }

    #[test]
    fn detector_extremes() {
        let recs = bench_records(4, 64, 64, 2).unwrap();
        let imgs: Vec<RgbImage> = recs.iter().map(|r| r.image.clone()).collect();
        let cfg = EvalConfig::default();
        assert_eq!(gdino_acc(&recs, &imgs, &EchoDetector::default(), &cfg).unwrap().accuracy, 1.0);
        assert_eq!(gdino_acc(&recs, &imgs, &NullDetector, &cfg).unwrap().accuracy, 0.0);
        assert_eq!(gdino_acc(&recs, &imgs, &EchoDetector(0.34), &cfg).unwrap().accuracy, 0.0);
        assert_eq!(gdino_acc(&recs, &imgs, &EchoDetector(0.35), &cfg).unwrap().accuracy, 1.0);
        assert_eq!(gdino_acc(&recs, &imgs, &ColorDetector, &cfg).unwrap().accuracy, 1.0);
    }

    #[test]
    fn empty_bench_gives_empty_report() {
        let clients = EvalClients {
            similarity: &FixedSimilarity(0.3),
            detector: &NullDetector,
            reward: None,
            aesthetic: None,
        };
        let rep = run_benchmark(&[], &IdentityInpainter, &clients, &EvalConfig::default(), 0, Execution::Parallel);
        assert!(rep.rows.is_empty());
        assert_eq!(rep.aggregate, Aggregate::default());
        assert!(rep.per_category.is_empty());
    }

    #[test]
    fn table_columns_in_order() {
        let rows = vec![MetricsRow {
            id: "a".into(),
            category: Category::Animal,
            ir: None,
            aesthetic: Some(6.5),
            clip_sim: Some(26.0),
            local_clip_sim: Some(22.0),
            gdino_hit: true,
            errors: vec![],
        }];
        let rep = MetricsReport::from_rows(0, EvalConfig::default(), rows);
        let t = rep.table();
        let header = t.lines().next().unwrap();
        let pos: Vec<usize> = ["IR", "AS", "CLIP Sim", "Local CLIP Sim", "Gdino Acc"].iter().map(|h| header.find(h).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(t.lines().nth(1).unwrap().contains(" - "));
        assert!(t.contains("animal"));
    }
}
