//! Diffusion loss, actual-token selection, the attention-alignment loss and
//! their combination.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};
use crate::maskgen::resize_mask;
use crate::raster::BinaryMask;
pub use crate::text::TokenizedPrompt;

/// β used when none is configured.
pub const DEFAULT_BETA: f64 = 0.00001;

/// Strictly increasing positions of the real prompt tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIndexSet(Vec<usize>);

impl TokenIndexSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(PainterError::EmptyPrompt);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PainterError::domain("token indices must be strictly increasing"));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `S = {1, …, actual_len − 2}`: everything between SOT and EOT.
pub fn actual_token_indices(p: &TokenizedPrompt) -> Result<TokenIndexSet> {
    if p.actual_len() <= 2 {
        return Err(PainterError::EmptyPrompt);
    }
    TokenIndexSet::new((1..p.actual_len() - 1).collect())
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps: &Array2<f64>, eps_pred: &Array2<f64>) -> Result<f64> {
    if eps.dim() != eps_pred.dim() {
        return Err(PainterError::shape(format!("eps {:?} vs prediction {:?}", eps.dim(), eps_pred.dim())));
    }
    let n = eps.len() as f64;
    Ok(eps.iter().zip(eps_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Loss value and its gradient with respect to `eps_pred`.
pub fn diffusion_loss_grad(eps: &Array2<f64>, eps_pred: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let loss = diffusion_loss(eps, eps_pred)?;
    let grad = (eps_pred - eps) * (2.0 / eps.len() as f64);
    Ok((loss, grad))
}

/// Reduction over pixels inside each layer's squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over `HW_i`, keeping magnitudes resolution independent.
    #[default]
    Mean,
    /// Plain squared 2-norm over `HW_i`.
    Sum,
}

/// Spatial dims of an `HW`-pixel map with the mask's aspect ratio.
fn map_dims(hw: usize, mask: &BinaryMask) -> Result<(usize, usize)> {
    let (mh, mw) = mask.dims();
    let h = ((hw as f64) * mh as f64 / mw as f64).sqrt().round().max(1.0) as usize;
    if h == 0 || hw % h != 0 {
        return Err(PainterError::shape(format!("cannot lay out {hw} pixels with the mask aspect {mh}x{mw}")));
    }
    Ok((h, hw / h))
}

fn check_maps(maps: &[Array2<f64>], s: &TokenIndexSet) -> Result<()> {
    if s.is_empty() {
        return Err(PainterError::EmptyPrompt);
    }
    if maps.is_empty() {
        return Err(PainterError::shape("no attention maps supplied"));
    }
    for (i, a) in maps.iter().enumerate() {
        if let Some(&j) = s.indices().last() {
            if j >= a.ncols() {
                return Err(PainterError::shape(format!("token index {j} out of range for map {i} with L = {}", a.ncols())));
            }
        }
    }
    Ok(())
}

/// Per-layer token-averaged map `a_i` (length `HW_i`).
fn token_average(a: &Array2<f64>, s: &TokenIndexSet) -> Vec<f64> {
    let inv = 1.0 / s.len() as f64;
    a.rows()
        .into_iter()
        .map(|row| s.indices().iter().map(|&j| row[j]).sum::<f64>() * inv)
        .collect()
}

/// Attention loss with gradients with respect to every map entry.
pub fn atal_loss_grad(
    maps: &[Array2<f64>],
    s: &TokenIndexSet,
    m: &BinaryMask,
    reduction: Reduction,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_maps(maps, s)?;
    let n = maps.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(maps.len());
    for a in maps {
        let hw = a.nrows();
        let (h, w) = map_dims(hw, m)?;
        let mi = resize_mask(m, h, w)?.flatten();
        let ai = token_average(a, s);
        let norm = match reduction {
            Reduction::Mean => 1.0 / hw as f64,
            Reduction::Sum => 1.0,
        };
        let sq: f64 = ai.iter().zip(&mi).map(|(x, y)| (x - y) * (x - y)).sum();
        total += norm * sq;

        let mut g = Array2::zeros(a.raw_dim());
        let coef = 2.0 * norm / (n * s.len() as f64);
        for (p, (x, y)) in ai.iter().zip(&mi).enumerate() {
            let gp = coef * (x - y);
            for &j in s.indices() {
                g[[p, j]] = gp;
            }
        }
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Mean over layers of the squared error between the token-averaged
/// attention map and the mask resized to that layer's resolution.
pub fn atal_loss(maps: &[Array2<f64>], s: &TokenIndexSet, m: &BinaryMask) -> Result<f64> {
    atal_loss_with(maps, s, m, Reduction::Mean)
}

pub fn atal_loss_with(maps: &[Array2<f64>], s: &TokenIndexSet, m: &BinaryMask, reduction: Reduction) -> Result<f64> {
    Ok(atal_loss_grad(maps, s, m, reduction)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diff: f64,
    pub atal: f64,
    pub beta: f64,
    pub total: f64,
}

/// `total = diff + β·atal`.
pub fn total_loss(diff: f64, atal: f64, beta: f64) -> Result<LossBreakdown> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(PainterError::domain(format!("beta = {beta} must be >= 0")));
    }
    Ok(LossBreakdown {
        diff,
        atal,
        beta,
        total: diff + beta * atal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Tokenizer, EOT, PAD, SOT};

    #[test]
    fn index_set_examples() {
        let p = TokenizedPrompt::new(vec![SOT, 10, 11, EOT, PAD, PAD], 4).unwrap();
        assert_eq!(actual_token_indices(&p).unwrap().indices(), &[1, 2]);
        let empty = TokenizedPrompt::new(vec![SOT, EOT, PAD], 2).unwrap();
        assert!(matches!(actual_token_indices(&empty), Err(PainterError::EmptyPrompt)));
    }

    #[test]
    fn index_set_for_reference_tokenizer() {
        let tok = Tokenizer::new(77, 49408);
        let p = tok.encode("a parrot");
        let s = actual_token_indices(&p).unwrap();
        assert_eq!(p.actual_len(), Tokenizer::words("a parrot").len() + 2);
        assert_eq!(s.indices(), &[1, 2]);
        assert!(!s.indices().contains(&0));
        assert!(!s.indices().contains(&(p.actual_len() - 1)));
    }

    #[test]
    fn diffusion_loss_examples() {
        let eps = Array2::from_shape_fn((2, 3), |(i, j)| i as f64 + j as f64);
        assert_eq!(diffusion_loss(&eps, &eps).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&eps, &(&eps + 1.0)).unwrap(), 1.0);
        assert!(matches!(diffusion_loss(&eps, &Array2::zeros((3, 2))), Err(PainterError::Shape(_))));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap().total, 0.7);
        let b = total_loss(1.0, 2.0, DEFAULT_BETA).unwrap();
        assert!((b.total - 1.00002).abs() < 1e-15);
        assert_eq!(b.total, b.diff + b.beta * b.atal);
        assert!(total_loss(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn atal_rejects_empty_index_set() {
        assert!(matches!(TokenIndexSet::new(vec![]), Err(PainterError::EmptyPrompt)));
    }
}
