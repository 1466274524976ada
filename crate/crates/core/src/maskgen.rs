//! Training-mask synthesis: bounding-box masks, finger-like irregular
//! scribbles, and the random mixture of those with the segmentation mask.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};
use crate::raster::{BinaryMask, SoftMask};

/// Probability mass of the box branch: `k <= BOX_CUTOFF`.
pub const BOX_CUTOFF: f64 = 0.25;
/// Upper edge of the irregular branch: `BOX_CUTOFF < k <= IRR_CUTOFF`.
pub const IRR_CUTOFF: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Box,
    Irr,
    Seg,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Box => "box",
            MaskKind::Irr => "irr",
            MaskKind::Seg => "seg",
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the dilation kernel and iteration count follow the coverage ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationSchedule {
    /// Linear interpolation from the range maximum (r = 0) to the minimum (r = 1):
    /// small masks get the strongest dilation.
    #[default]
    Linear,
    /// Uniform draw from the configured ranges, ignoring coverage.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskGenParams {
    pub seed: u64,
    /// Fraction of the bbox side length added to each side.
    pub box_expand_range: (f64, f64),
    pub dilation_kernel_range: (usize, usize),
    pub dilation_iter_range: (usize, usize),
    pub dilation_schedule: DilationSchedule,
    pub draw_count_range: (usize, usize),
    pub sub_iter_range: (usize, usize),
    pub brush_width_range: (usize, usize),
    pub stroke_length_range: (usize, usize),
}

impl Default for MaskGenParams {
    fn default() -> Self {
        Self {
            seed: 0,
            box_expand_range: (0.0, 0.3),
            dilation_kernel_range: (3, 15),
            dilation_iter_range: (1, 3),
            dilation_schedule: DilationSchedule::Linear,
            draw_count_range: (1, 4),
            sub_iter_range: (4, 12),
            brush_width_range: (8, 24),
            stroke_length_range: (10, 60),
        }
    }
}

impl MaskGenParams {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.box_expand_range;
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && a <= b) {
            return Err(PainterError::domain(format!("box_expand_range {a}..{b} invalid")));
        }
        let int_ranges = [
            ("dilation_kernel_range", self.dilation_kernel_range, 1),
            ("dilation_iter_range", self.dilation_iter_range, 0),
            ("draw_count_range", self.draw_count_range, 0),
            ("sub_iter_range", self.sub_iter_range, 0),
            ("brush_width_range", self.brush_width_range, 1),
            ("stroke_length_range", self.stroke_length_range, 0),
        ];
        for (name, (lo, hi), floor) in int_ranges {
            if lo > hi || lo < floor {
                return Err(PainterError::domain(format!("{name} {lo}..{hi} invalid")));
            }
        }
        Ok(())
    }

    /// Fresh generator seeded from `self.seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Kernel size and iteration count for coverage ratio `r`.
    pub fn dilation_for(&self, r: f64, rng: &mut impl Rng) -> (usize, usize) {
        let (kmin, kmax) = self.dilation_kernel_range;
        let (imin, imax) = self.dilation_iter_range;
        match self.dilation_schedule {
            DilationSchedule::Linear => {
                let r = r.clamp(0.0, 1.0);
                let lerp = |from: usize, to: usize| from as f64 + (to as f64 - from as f64) * r;
                (lerp(kmax, kmin).round() as usize, lerp(imax, imin).round() as usize)
            }
            DilationSchedule::Random => (rng.random_range(kmin..=kmax), rng.random_range(imin..=imax)),
        }
    }
}

pub fn coverage_ratio(m: &BinaryMask) -> f64 {
    m.count() as f64 / (m.height() * m.width()) as f64
}

/// Filled rectangle around `m_seg`'s nonzero pixels, each side pushed out by
/// a random fraction of the box side length and clipped to the frame.
pub fn gen_box_mask(m_seg: &BinaryMask, params: &MaskGenParams, rng: &mut impl Rng) -> Result<BinaryMask> {
    params.validate()?;
    let bb = m_seg.bbox().ok_or(PainterError::EmptyMask)?;
    let (lo, hi) = params.box_expand_range;
    let mut frac = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (bh, bw) = (bb.height() as f64, bb.width() as f64);
    let top = (frac() * bh).round() as usize;
    let bottom = (frac() * bh).round() as usize;
    let left = (frac() * bw).round() as usize;
    let right = (frac() * bw).round() as usize;
    let (h, w) = m_seg.dims();
    let grown = bb.grow(top, bottom, left, right, h, w);
    BinaryMask::from_fn(h, w, |y, x| {
        (grown.y0..=grown.y1).contains(&y) && (grown.x0..=grown.x1).contains(&x)
    })
}

/// Square-kernel binary dilation, anchor at `k / 2` as in OpenCV.
pub fn dilate(m: &BinaryMask, kernel: usize, iterations: usize) -> BinaryMask {
    if kernel <= 1 || iterations == 0 {
        return m.clone();
    }
    let (h, w) = m.dims();
    let before = (kernel / 2) as isize;
    let after = (kernel - 1) as isize - before;
    let mut cur: Vec<u8> = m.pixels().to_vec();
    let mut tmp = vec![0u8; h * w];
    for _ in 0..iterations {
        // rows
        for y in 0..h {
            let row = &cur[y * w..(y + 1) * w];
            for x in 0..w {
                let lo = (x as isize - before).max(0) as usize;
                let hi = ((x as isize + after) as usize).min(w - 1);
                tmp[y * w + x] = row[lo..=hi].iter().copied().max().unwrap_or(0);
            }
        }
        // columns
        for x in 0..w {
            for y in 0..h {
                let lo = (y as isize - before).max(0) as usize;
                let hi = ((y as isize + after) as usize).min(h - 1);
                cur[y * w + x] = (lo..=hi).map(|yy| tmp[yy * w + x]).max().unwrap_or(0);
            }
        }
    }
    BinaryMask::from_vec(h, w, cur).expect("dilation keeps dims and polarity")
}

fn stamp_disc(m: &mut BinaryMask, cy: f64, cx: f64, radius: f64) {
    let (h, w) = m.dims();
    let r = radius.max(0.5);
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = ((cx + r).ceil() as isize).clamp(0, w as isize - 1) as usize;
    if cy + r < 0.0 || cx + r < 0.0 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                m.set(y, x, true);
            }
        }
    }
}

fn draw_line(m: &mut BinaryMask, from: (f64, f64), to: (f64, f64), width: f64) {
    let (dy, dx) = (to.0 - from.0, to.1 - from.1);
    let len = (dy * dy + dx * dx).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        stamp_disc(m, from.0 + dy * t, from.1 + dx * t, width / 2.0);
    }
}

fn fill_square(m: &mut BinaryMask, cy: f64, cx: f64, side: f64) {
    let (h, w) = m.dims();
    let half = side / 2.0;
    let y0 = (cy - half).round().max(0.0) as usize;
    let x0 = (cx - half).round().max(0.0) as usize;
    let y1 = ((cy + half).round() as isize).clamp(0, h as isize - 1) as usize;
    let x1 = ((cx + half).round() as isize).clamp(0, w as isize - 1) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            m.set(y, x, true);
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stroke {
    Line,
    Circle,
    Square,
}

/// Finger-like irregular mask: dilate by a coverage-dependent kernel, then
/// scribble random lines, circles and squares starting from the dilated
/// region. An empty input yields an empty output.
pub fn gen_irregular_mask(m_seg: &BinaryMask, params: &MaskGenParams, rng: &mut impl Rng) -> Result<BinaryMask> {
    params.validate()?;
    let r = coverage_ratio(m_seg);
    let (kernel, iterations) = params.dilation_for(r, rng);
    let mut m_d = dilate(m_seg, kernel, iterations);

    let points = m_d.nonzero_points();
    if points.is_empty() {
        return Ok(m_d);
    }

    let (h, w) = m_d.dims();
    let draws = rng.random_range(params.draw_count_range.0..=params.draw_count_range.1);
    for _ in 0..draws {
        let (sy, sx) = points[rng.random_range(0..points.len())];
        let mut cur = (sy as f64, sx as f64);
        let subs = rng.random_range(params.sub_iter_range.0..=params.sub_iter_range.1);
        for _ in 0..subs {
            let angle = rng.random_range(0.0..TAU);
            let length = rng.random_range(params.stroke_length_range.0..=params.stroke_length_range.1) as f64;
            let brush = rng.random_range(params.brush_width_range.0..=params.brush_width_range.1) as f64;
            let stroke = match rng.random_range(0..3u8) {
                0 => Stroke::Line,
                1 => Stroke::Circle,
                _ => Stroke::Square,
            };
            let next = (
                (cur.0 + length * angle.sin()).clamp(0.0, (h - 1) as f64),
                (cur.1 + length * angle.cos()).clamp(0.0, (w - 1) as f64),
            );
            match stroke {
                Stroke::Line => draw_line(&mut m_d, cur, next, brush),
                Stroke::Circle => stamp_disc(&mut m_d, next.0, next.1, brush / 2.0),
                Stroke::Square => fill_square(&mut m_d, next.0, next.1, brush),
            }
            cur = next;
        }
    }
    Ok(m_d)
}

/// Kind selected by the mixing number `k`.
pub fn kind_for(k: f64) -> Result<MaskKind> {
    if !(0.0..=1.0).contains(&k) {
        return Err(PainterError::domain(format!("mixing number k = {k} outside [0, 1]")));
    }
    Ok(if k <= BOX_CUTOFF {
        MaskKind::Box
    } else if k <= IRR_CUTOFF {
        MaskKind::Irr
    } else {
        MaskKind::Seg
    })
}

/// Mixture sampler. An empty segmentation mask cannot produce a box, so that
/// branch falls back to the segmentation mask itself.
pub fn sample_mask(
    m_seg: &BinaryMask,
    k: f64,
    params: &MaskGenParams,
    rng: &mut impl Rng,
) -> Result<(BinaryMask, MaskKind)> {
    match kind_for(k)? {
        MaskKind::Box => match gen_box_mask(m_seg, params, rng) {
            Ok(m) => Ok((m, MaskKind::Box)),
            Err(PainterError::EmptyMask) => Ok((m_seg.clone(), MaskKind::Seg)),
            Err(e) => Err(e),
        },
        MaskKind::Irr => Ok((gen_irregular_mask(m_seg, params, rng)?, MaskKind::Irr)),
        MaskKind::Seg => Ok((m_seg.clone(), MaskKind::Seg)),
    }
}

/// Overlap weights for area averaging `src` cells onto `dst` cells, in
/// integer units of `1 / (src * dst)` so integer factors stay exact.
fn area_weights(src: usize, dst: usize) -> Array2<f64> {
    let mut wts = Array2::zeros((dst, src));
    for i in 0..dst {
        let (lo, hi) = (i * src, (i + 1) * src);
        let first = lo / dst;
        let last = (hi - 1) / dst;
        for j in first..=last.min(src - 1) {
            let overlap = hi.min((j + 1) * dst) - lo.max(j * dst);
            wts[[i, j]] = overlap as f64 / src as f64;
        }
    }
    wts
}

/// Area-average resize to `target_h`×`target_w`; identity when dims match.
pub fn resize_mask(m: &BinaryMask, target_h: usize, target_w: usize) -> Result<SoftMask> {
    if target_h == 0 || target_w == 0 {
        return Err(PainterError::domain(format!("resize target {target_h}x{target_w} must be positive")));
    }
    let soft = m.to_soft();
    if m.dims() == (target_h, target_w) {
        return Ok(soft);
    }
    let ry = area_weights(m.height(), target_h);
    let rx = area_weights(m.width(), target_w);
    let out = ry.dot(&soft.0).dot(&rx.t()).mapv(|v| v.clamp(0.0, 1.0));
    Ok(SoftMask(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_ratio(&BinaryMask::ones(8, 8).unwrap()), 1.0);
        assert_eq!(coverage_ratio(&BinaryMask::zeros(8, 8).unwrap()), 0.0);
        let half = BinaryMask::from_fn(8, 8, |y, _| y < 4).unwrap();
        assert_eq!(half.count(), 32);
        assert_eq!(coverage_ratio(&half), 0.5);
    }

    #[test]
    fn box_of_single_pixel_without_expansion() {
        let m = BinaryMask::from_fn(12, 12, |y, x| y == 5 && x == 5).unwrap();
        let p = MaskGenParams {
            box_expand_range: (0.0, 0.0),
            ..Default::default()
        };
        let out = gen_box_mask(&m, &p, &mut rng(1)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn box_of_full_frame_clips() {
        let m = BinaryMask::ones(10, 14).unwrap();
        let out = gen_box_mask(&m, &MaskGenParams::default(), &mut rng(3)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn box_of_empty_mask_errors() {
        let m = BinaryMask::zeros(10, 10).unwrap();
        assert!(matches!(
            gen_box_mask(&m, &MaskGenParams::default(), &mut rng(0)),
            Err(PainterError::EmptyMask)
        ));
    }

    #[test]
    fn irregular_of_empty_mask_is_empty() {
        let m = BinaryMask::zeros(32, 32).unwrap();
        let out = gen_irregular_mask(&m, &MaskGenParams::default(), &mut rng(9)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn irregular_is_deterministic() {
        let m = BinaryMask::from_fn(64, 64, |y, x| (20..30).contains(&y) && (10..40).contains(&x)).unwrap();
        let p = MaskGenParams::default();
        let a = gen_irregular_mask(&m, &p, &mut rng(42)).unwrap();
        let b = gen_irregular_mask(&m, &p, &mut rng(42)).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(&m));
    }

    #[test]
    fn linear_schedule_is_monotone_in_coverage() {
        let p = MaskGenParams::default();
        let mut r = rng(0);
        assert_eq!(p.dilation_for(0.0, &mut r), (15, 3));
        assert_eq!(p.dilation_for(1.0, &mut r), (3, 1));
        let mut last = usize::MAX;
        for i in 0..=20 {
            let (k, _) = p.dilation_for(i as f64 / 20.0, &mut r);
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn dilation_grows_single_pixel_to_kernel_square() {
        let m = BinaryMask::from_fn(9, 9, |y, x| y == 4 && x == 4).unwrap();
        let d = dilate(&m, 3, 1);
        assert_eq!(d.count(), 9);
        let d2 = dilate(&m, 3, 2);
        assert_eq!(d2.count(), 25);
    }

    #[test]
    fn mixing_branches_follow_cutoffs() {
        let m = BinaryMask::from_fn(16, 16, |y, x| (4..8).contains(&y) && (4..8).contains(&x)).unwrap();
        let p = MaskGenParams::default();
        let kind = |k| sample_mask(&m, k, &p, &mut rng(0)).unwrap().1;
        assert_eq!(kind(0.10), MaskKind::Box);
        assert_eq!(kind(0.50), MaskKind::Irr);
        assert_eq!(kind(0.90), MaskKind::Seg);
        assert_eq!(kind(0.25), MaskKind::Box);
        assert_eq!(kind(0.75), MaskKind::Irr);
        assert_eq!(kind(0.0), MaskKind::Box);
        assert_eq!(kind(1.0), MaskKind::Seg);
        assert!(matches!(sample_mask(&m, 1.5, &p, &mut rng(0)), Err(PainterError::Domain(_))));
        assert!(matches!(sample_mask(&m, -0.1, &p, &mut rng(0)), Err(PainterError::Domain(_))));
    }

    #[test]
    fn empty_seg_box_branch_falls_back() {
        let m = BinaryMask::zeros(8, 8).unwrap();
        let (out, kind) = sample_mask(&m, 0.1, &MaskGenParams::default(), &mut rng(0)).unwrap();
        assert_eq!(kind, MaskKind::Seg);
        assert_eq!(out, m);
    }

    #[test]
    fn resize_examples() {
        let ones = BinaryMask::ones(12, 20).unwrap();
        for (th, tw) in [(1, 1), (5, 7), (12, 20), (24, 3)] {
            let r = resize_mask(&ones, th, tw).unwrap();
            assert!(r.0.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{th}x{tw}");
        }
        let m = BinaryMask::from_fn(7, 9, |y, x| (y + 2 * x) % 3 == 0).unwrap();
        assert_eq!(resize_mask(&m, 7, 9).unwrap(), m.to_soft());

        let checker = BinaryMask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
        let r = resize_mask(&checker, 1, 1).unwrap();
        assert_eq!(r.0[[0, 0]], 0.5);
        assert!(matches!(resize_mask(&checker, 0, 1), Err(PainterError::Domain(_))));
    }

    #[test]
    fn resize_preserves_mean_for_divisible_dims() {
        let m = BinaryMask::from_fn(32, 48, |y, x| (y * 5 + x * 3) % 7 < 3).unwrap();
        let src_mean = coverage_ratio(&m);
        for (th, tw) in [(16, 24), (8, 12), (4, 6), (2, 3), (1, 1), (32, 16)] {
            let r = resize_mask(&m, th, tw).unwrap();
            assert!((r.mean() - src_mean).abs() < 1e-12);
            assert!(r.is_valid());
        }
        // power-of-two factors are exact in binary floating point
        let r = resize_mask(&m, 8, 12).unwrap();
        let total: f64 = r.0.iter().sum();
        assert_eq!(total * 16.0, m.count() as f64);
    }
}
