use ndarray::{Array2, Axis};

use crate::error::{PainterError, Result};

/// Channel-major feature map: `data` is `C`×`(h·w)` with row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

/// Latent tensors are feature maps in the diffusion latent space.
pub type LatentTensor = FeatureMap;

impl FeatureMap {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Result<Self> {
        if data.ncols() != h * w {
            return Err(PainterError::shape(format!(
                "feature has {} pixels, expected {h}x{w}",
                data.ncols()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: Array2::zeros((c, h * w)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.h, self.w)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts.first().ok_or_else(|| PainterError::shape("nothing to concatenate"))?;
        if parts.iter().any(|p| p.h != first.h || p.w != first.w) {
            return Err(PainterError::shape("concatenated features disagree spatially"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| PainterError::shape(e.to_string()))?;
        Ok(FeatureMap { h: first.h, w: first.w, data })
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// 2×2 average pooling. Requires even spatial dims.
pub fn avg_pool2(x: &FeatureMap) -> Result<FeatureMap> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(PainterError::shape(format!("cannot pool odd dims {}x{}", x.h, x.w)));
    }
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Array2::zeros((x.channels(), h * w));
    for c in 0..x.channels() {
        let src = x.data.row(c);
        let mut dst = out.row_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let a = src[(2 * y) * x.w + 2 * xx];
                let b = src[(2 * y) * x.w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * x.w + 2 * xx];
                let d = src[(2 * y + 1) * x.w + 2 * xx + 1];
                dst[y * w + xx] = 0.25 * (a + b + cc + d);
            }
        }
    }
    Ok(FeatureMap { h, w, data: out })
}

pub fn avg_pool2_backward(grad: &FeatureMap, src_h: usize, src_w: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(grad.channels(), src_h, src_w);
    for c in 0..grad.channels() {
        let g = grad.data.row(c);
        let mut dst = out.data.row_mut(c);
        for y in 0..src_h {
            for x in 0..src_w {
                dst[y * src_w + x] = 0.25 * g[(y / 2) * grad.w + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = FeatureMap::zeros(x.channels(), h, w);
    for c in 0..x.channels() {
        let src = x.data.row(c);
        let mut dst = out.data.row_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = FeatureMap::zeros(grad.channels(), h, w);
    for c in 0..grad.channels() {
        let g = grad.data.row(c);
        let mut dst = out.data.row_mut(c);
        for y in 0..grad.h {
            for x in 0..grad.w {
                dst[(y / 2) * w + x / 2] += g[y * grad.w + x];
            }
        }
    }
    out
}

/// Resample by repeated pooling / upsampling to reach `(h, w)`.
pub fn resample_to(x: &FeatureMap, h: usize, w: usize) -> Result<FeatureMap> {
    let mut cur = x.clone();
    while cur.h > h || cur.w > w {
        cur = avg_pool2(&cur)?;
    }
    while cur.h < h || cur.w < w {
        cur = upsample2(&cur);
    }
    if cur.h != h || cur.w != w {
        return Err(PainterError::shape(format!(
            "cannot resample {}x{} to {h}x{w}",
            x.h, x.w
        )));
    }
    Ok(cur)
}

/// Adjoint of [`resample_to`] given the source dims.
pub fn resample_to_backward(grad: &FeatureMap, src_h: usize, src_w: usize) -> FeatureMap {
    if grad.h == src_h && grad.w == src_w {
        return grad.clone();
    }
    if grad.h < src_h {
        // forward pooled: src -> src/2 -> ... -> grad dims
        let mut dims = vec![(src_h, src_w)];
        while dims.last().unwrap().0 > grad.h {
            let (a, b) = *dims.last().unwrap();
            dims.push((a / 2, b / 2));
        }
        let mut cur = grad.clone();
        for &(hh, ww) in dims.iter().rev().skip(1) {
            cur = avg_pool2_backward(&cur, hh, ww);
        }
        cur
    } else {
        let mut cur = grad.clone();
        while cur.h > src_h {
            cur = upsample2_backward(&cur);
        }
        cur
    }
}
