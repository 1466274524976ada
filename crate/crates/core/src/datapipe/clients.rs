//! Model-client interfaces used to build local prompts, with deterministic
//! offline stubs and a bounded-retry wrapper.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use image::RgbImage;

use crate::error::{PainterError, Result};

pub trait CaptionerClient: Send + Sync {
    fn caption(&self, crop: &RgbImage) -> Result<String>;
}

pub trait ShortenerClient: Send + Sync {
    fn shorten(&self, caption: &str) -> Result<String>;
}

/// Image–text cosine similarity in `[-1, 1]`.
pub trait SimilarityClient: Send + Sync {
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64>;
}

impl<T: CaptionerClient + ?Sized> CaptionerClient for &T {
    fn caption(&self, crop: &RgbImage) -> Result<String> {
        (**self).caption(crop)
    }
}

impl<T: ShortenerClient + ?Sized> ShortenerClient for &T {
    fn shorten(&self, caption: &str) -> Result<String> {
        (**self).shorten(caption)
    }
}

impl<T: SimilarityClient + ?Sized> SimilarityClient for &T {
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64> {
        (**self).score(image, text)
    }
}

/// Named reference colours used by the stubs.
pub const PALETTE: [(&str, [u8; 3]); 9] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [230, 210, 40]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 60, 190]),
    ("white", [240, 240, 240]),
    ("black", [20, 20, 20]),
    ("gray", [128, 128, 128]),
];

pub fn mean_rgb(img: &RgbImage) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    acc.map(|v| v / n)
}

/// Name of the palette colour nearest the image mean.
pub fn dominant_color(img: &RgbImage) -> &'static str {
    let m = mean_rgb(img);
    PALETTE
        .iter()
        .min_by(|a, b| {
            let d = |c: &[u8; 3]| (0..3).map(|i| (m[i] - c[i] as f64).powi(2)).sum::<f64>();
            d(&a.1).total_cmp(&d(&b.1))
        })
        .map(|(n, _)| *n)
        .unwrap_or("gray")
}

/// Verbose caption naming the dominant colour, standing in for a
/// multimodal captioner.
#[derive(Debug, Clone, Default)]
pub struct ColorCaptioner;

impl CaptionerClient for ColorCaptioner {
    fn caption(&self, crop: &RgbImage) -> Result<String> {
        Ok(format!(
            "The image shows a {} object, centered in the frame, with soft lighting and a plain background.",
            dominant_color(crop)
        ))
    }
}

#[derive(Debug, Clone)]
pub struct FixedCaptioner(pub String);

impl CaptionerClient for FixedCaptioner {
    fn caption(&self, _crop: &RgbImage) -> Result<String> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Default)]
pub struct IdentityShortener;

impl ShortenerClient for IdentityShortener {
    fn shorten(&self, caption: &str) -> Result<String> {
        Ok(caption.to_owned())
    }
}

/// Keeps the main noun phrase: text after "shows"/"of" up to the first
/// comma or period, capped at `max_words`.
#[derive(Debug, Clone)]
pub struct HeadPhraseShortener {
    pub max_words: usize,
}

impl Default for HeadPhraseShortener {
    fn default() -> Self {
        Self { max_words: 6 }
    }
}

impl ShortenerClient for HeadPhraseShortener {
    fn shorten(&self, caption: &str) -> Result<String> {
        let clause = caption.split([',', '.']).next().unwrap_or(caption);
        let words: Vec<&str> = clause.split_whitespace().collect();
        let start = words
            .iter()
            .position(|w| matches!(w.to_lowercase().as_str(), "shows" | "of" | "showing"))
            .map(|i| i + 1)
            .unwrap_or(0);
        let kept: Vec<&str> = words[start.min(words.len())..].iter().take(self.max_words).copied().collect();
        if kept.is_empty() {
            Ok(caption.trim().to_owned())
        } else {
            Ok(kept.join(" "))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedSimilarity(pub f64);

impl SimilarityClient for FixedSimilarity {
    fn score(&self, _image: &RgbImage, _text: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Per-prompt scores with a fallback, for fixtures with known values.
#[derive(Debug, Clone, Default)]
pub struct TableSimilarity {
    pub scores: BTreeMap<String, f64>,
    pub fallback: f64,
}

impl SimilarityClient for TableSimilarity {
    fn score(&self, _image: &RgbImage, text: &str) -> Result<f64> {
        Ok(self.scores.get(text).copied().unwrap_or(self.fallback))
    }
}

/// Cosine between the centred mean image colour and the centred palette
/// colour named in the text; 0 when no colour is named.
#[derive(Debug, Clone, Default)]
pub struct ColorSimilarity;

impl SimilarityClient for ColorSimilarity {
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64> {
        let lower = text.to_lowercase();
        let Some((_, rgb)) = PALETTE
            .iter()
            .find(|(name, _)| lower.split(|c: char| !c.is_alphanumeric()).any(|w| w == *name))
        else {
            return Ok(0.0);
        };
        let m = mean_rgb(image).map(|v| v - 127.5);
        let c = rgb.map(|v| v as f64 - 127.5);
        let dot: f64 = (0..3).map(|i| m[i] * c[i]).sum();
        let nm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nm == 0.0 || nc == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (nm * nc)).clamp(-1.0, 1.0))
    }
}

/// Retry budget and per-call deadline for remote clients.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Run `call` up to `attempts` times. A call that returns after the
    /// deadline counts as a failed attempt.
    pub fn run<T>(&self, what: &str, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let mut last = None;
        for attempt in 1..=self.attempts.max(1) {
            let started = Instant::now();
            match call() {
                Ok(v) if started.elapsed() <= self.timeout => return Ok(v),
                Ok(_) => last = Some(format!("{what} timed out after {:?}", self.timeout)),
                Err(e) => last = Some(format!("{what} attempt {attempt} failed: {e}")),
            }
            log::debug!("{}", last.as_deref().unwrap_or_default());
        }
        Err(PainterError::client(last.unwrap_or_default()))
    }
}

/// Wraps any client with a [`RetryPolicy`].
#[derive(Debug, Clone)]
pub struct Retrying<C> {
    pub inner: C,
    pub policy: RetryPolicy,
}

impl<C> Retrying<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<C: CaptionerClient> CaptionerClient for Retrying<C> {
    fn caption(&self, crop: &RgbImage) -> Result<String> {
        self.policy.run("caption", || self.inner.caption(crop))
    }
}

impl<C: ShortenerClient> ShortenerClient for Retrying<C> {
    fn shorten(&self, caption: &str) -> Result<String> {
        self.policy.run("shorten", || self.inner.shorten(caption))
    }
}

impl<C: SimilarityClient> SimilarityClient for Retrying<C> {
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64> {
        self.policy.run("similarity", || self.inner.score(image, text))
    }
}

/// The three clients the prompt pipeline needs.
pub struct PromptClients<'a> {
    pub captioner: &'a dyn CaptionerClient,
    pub shortener: &'a dyn ShortenerClient,
    pub similarity: &'a dyn SimilarityClient,
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        fails: usize,
        calls: AtomicUsize,
    }

    impl ShortenerClient for Flaky {
        fn shorten(&self, caption: &str) -> Result<String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fails {
                Err(PainterError::client("transient"))
            } else {
                Ok(caption.to_uppercase())
            }
        }
    }

    #[test]
    fn retries_are_bounded() {
        let ok = Retrying::new(Flaky { fails: 2, calls: AtomicUsize::new(0) }, RetryPolicy::default());
        assert_eq!(ok.shorten("x").unwrap(), "X");
        assert_eq!(ok.inner.calls.load(Ordering::SeqCst), 3);

        let bad = Retrying::new(Flaky { fails: 3, calls: AtomicUsize::new(0) }, RetryPolicy::default());
        assert!(matches!(bad.shorten("x"), Err(PainterError::Client { .. })));
        assert_eq!(bad.inner.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn stubs_are_deterministic_and_sensible() {
        let red = RgbImage::from_pixel(8, 8, Rgb([210, 30, 40]));
        let cap = ColorCaptioner.caption(&red).unwrap();
        assert!(cap.contains("red"));
        let short = HeadPhraseShortener::default().shorten(&cap).unwrap();
        assert_eq!(short, "a red object");
        let s1 = ColorSimilarity.score(&red, &short).unwrap();
        assert_eq!(s1, ColorSimilarity.score(&red, &short).unwrap());
        assert!(s1 > 0.9);
        assert!(ColorSimilarity.score(&red, "a blue object").unwrap() < 0.2);
        assert_eq!(ColorSimilarity.score(&red, "something").unwrap(), 0.0);
    }
}
