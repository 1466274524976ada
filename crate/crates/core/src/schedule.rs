//! Forward noising process `z_t = α_t z_0 + σ_t ε`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};
use crate::nn::FeatureMap;

/// Per-step coefficients, stored for `t = 1..=T` at index `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != sigma.len() {
            return Err(PainterError::domain("alpha and sigma must be nonempty and equally long"));
        }
        if alpha.iter().chain(&sigma).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PainterError::domain("schedule coefficients must be finite and nonnegative"));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) || sigma.windows(2).any(|w| w[1] < w[0]) {
            return Err(PainterError::domain("alpha must decrease and sigma increase"));
        }
        Ok(Self { alpha, sigma })
    }

    /// Variance-preserving "scaled linear" schedule (β from 0.00085 to 0.012
    /// over 1000 steps). Shorter schedules subsample the 1000-step one.
    pub fn scaled_linear(total: usize) -> Result<Self> {
        if total == 0 || total > 1000 {
            return Err(PainterError::domain(format!("schedule length {total} outside 1..=1000")));
        }
        const BASE: usize = 1000;
        let (b0, b1) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let mut abar = Vec::with_capacity(BASE);
        let mut acc = 1.0;
        for i in 0..BASE {
            let b = b0 + (b1 - b0) * i as f64 / (BASE - 1) as f64;
            acc *= 1.0 - b * b;
            abar.push(acc);
        }
        let picked: Vec<f64> = (1..=total).map(|t| abar[t * BASE / total - 1]).collect();
        let alpha = picked.iter().map(|a| a.sqrt()).collect();
        let sigma = picked.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self::new(alpha, sigma)
    }

    pub fn total_steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(PainterError::Range(format!("t = {t} outside [1, {}]", self.total_steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.sigma[t - 1])
    }

    /// Coefficients with the clean endpoint `t = 0 → (1, 0)` included.
    pub fn coeffs_or_clean(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 {
            Ok((1.0, 0.0))
        } else {
            Ok((self.alpha(t)?, self.sigma(t)?))
        }
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let total = self.total_steps();
        let steps = steps.clamp(1, total);
        let mut ts: Vec<usize> = (0..steps)
            .map(|k| total - (k * total) / steps)
            .collect();
        ts.dedup();
        ts
    }
}

pub fn add_noise_raw(z0: &Array2<f64>, eps: &Array2<f64>, alpha: f64, sigma: f64) -> Result<Array2<f64>> {
    if z0.dim() != eps.dim() {
        return Err(PainterError::shape(format!("z0 {:?} vs eps {:?}", z0.dim(), eps.dim())));
    }
    Ok(z0 * alpha + eps * sigma)
}

/// `α_t·z0 + σ_t·eps`.
pub fn add_noise(z0: &FeatureMap, t: usize, eps: &FeatureMap, sched: &NoiseSchedule) -> Result<FeatureMap> {
    if !z0.same_shape(eps) {
        return Err(PainterError::shape("z0 and eps shapes differ"));
    }
    let data = add_noise_raw(&z0.data, &eps.data, sched.alpha(t)?, sched.sigma(t)?)?;
    Ok(FeatureMap { h: z0.h, w: z0.w, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> FeatureMap {
        FeatureMap::new(1, 1, Array2::from_elem((1, 1), v)).unwrap()
    }

    fn one_step(alpha: f64, sigma: f64) -> NoiseSchedule {
        NoiseSchedule::new(vec![alpha], vec![sigma]).unwrap()
    }

    #[test]
    fn add_noise_examples() {
        let (z0, eps) = (scalar(1.0), scalar(2.0));
        assert_eq!(add_noise(&z0, 1, &eps, &one_step(1.0, 0.0)).unwrap().data[[0, 0]], 1.0);
        assert_eq!(add_noise(&z0, 1, &eps, &one_step(0.0, 1.0)).unwrap().data[[0, 0]], 2.0);
        let z = add_noise(&z0, 1, &eps, &one_step(0.6, 0.8)).unwrap().data[[0, 0]];
        assert!((z - 2.2).abs() < 1e-15);
    }

    #[test]
    fn timestep_range_is_checked() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let (z0, eps) = (scalar(1.0), scalar(2.0));
        assert!(matches!(add_noise(&z0, 0, &eps, &s), Err(PainterError::Range(_))));
        assert!(matches!(add_noise(&z0, 51, &eps, &s), Err(PainterError::Range(_))));
        assert!(add_noise(&z0, 50, &eps, &s).is_ok());
    }

    #[test]
    fn scaled_linear_is_monotone_and_variance_preserving() {
        for total in [1, 50, 1000] {
            let s = NoiseSchedule::scaled_linear(total).unwrap();
            for t in 1..=total {
                let (a, sg) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
                assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            }
        }
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        assert!(s.sigma(50).unwrap() > 0.99);
        let s1000 = NoiseSchedule::scaled_linear(1000).unwrap();
        assert_eq!(s.alpha(25).unwrap(), s1000.alpha(500).unwrap());
    }

    #[test]
    fn sampling_timesteps_descend_and_cover() {
        let s = NoiseSchedule::scaled_linear(50).unwrap();
        let ts = s.sampling_timesteps(10);
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[0], 50);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(*ts.last().unwrap() >= 1);
        assert_eq!(s.sampling_timesteps(80).len(), 50);
        assert!(NoiseSchedule::new(vec![0.5, 0.9], vec![0.1, 0.2]).is_err());
    }
}
