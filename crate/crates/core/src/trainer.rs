//! Training step and loop for the control branch.
//!
//! Each record contributes the noise-prediction error plus `β` times the
//! attention loss. Per-record gradients may be computed in parallel; they
//! are reduced in record order, so a fixed seed gives bit-identical curves
//! with or without the `parallel` feature.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::branch::{BranchGrads, BranchInput, DualBranchNet, PreservationScale};
use crate::datapipe::BenchRecord;
use crate::error::{PainterError, Result};
use crate::losses::{actual_token_indices, atal_loss_grad, diffusion_loss_grad, total_loss, LossBreakdown, Reduction, DEFAULT_BETA};
use crate::maskgen::{resize_mask, sample_mask, MaskGenParams};
use crate::model::{Models, Preset};
use crate::nn::{FeatureMap, ParamStore};
use crate::par::Execution;
use crate::schedule::add_noise;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mask: MaskGenParams,
    pub preset: Preset,
    /// Probability of replacing the prompt with the empty string.
    pub prompt_dropout: f64,
    /// Capture branch attention maps and evaluate the attention loss.
    pub capture_attention: bool,
    pub reduction: Reduction,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            steps: 200,
            batch: 8,
            lr: 1e-4,
            seed: 0,
            mask: MaskGenParams::default(),
            preset: Preset::Toy,
            prompt_dropout: 0.0,
            capture_attention: true,
            reduction: Reduction::Mean,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(PainterError::domain("steps and batch must be positive"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(PainterError::domain(format!("beta = {} must be >= 0", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(PainterError::domain(format!("lr = {} must be >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(PainterError::domain("prompt_dropout must lie in [0, 1]"));
        }
        self.mask.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub diff: f64,
    pub atal: f64,
    pub total: f64,
}

/// Loss and gradients of a single record.
fn record_grads(record: &BenchRecord, models: &Models, cfg: &TrainConfig, seed: u64) -> Result<(LossBreakdown, BranchGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = &models.net;
    let k: f64 = rng.random();
    let (mask, _) = sample_mask(&record.seg_mask, k, &cfg.mask, &mut rng)?;

    let z0 = models.vae.encode(&record.image)?;
    let z0_masked = models.vae.encode_masked(&record.image, &mask)?;
    let latent_mask = resize_mask(&mask, z0.h, z0.w)?;
    let t = rng.random_range(1..=models.sched.total_steps());
    let eps = FeatureMap::new(
        z0.h,
        z0.w,
        Array2::from_shape_simple_fn(z0.data.raw_dim(), || StandardNormal.sample(&mut rng)),
    )?;
    let z_t = add_noise(&z0, t, &eps, &models.sched)?;

    let prompt = if cfg.prompt_dropout > 0.0 && rng.random_bool(cfg.prompt_dropout) {
        ""
    } else {
        record.local_prompt.as_str()
    };
    let (tokens, ctx) = models.text.encode(prompt);

    let input = BranchInput::new(z_t, z0_masked, latent_mask)?;
    let fwd = net.forward_joint(&input, t, &ctx, PreservationScale::default())?;
    let (diff, d_pred) = diffusion_loss_grad(&eps.data, &fwd.pred.data)?;

    let mut atal = 0.0;
    let mut d_maps = None;
    if cfg.capture_attention && !net.spec.attention.is_empty() {
        // prompts without actual tokens carry no attention target
        if let Ok(s) = actual_token_indices(&tokens) {
            let (value, grads) = atal_loss_grad(&fwd.attention_maps(), &s, &mask, cfg.reduction)?;
            atal = value;
            if cfg.beta > 0.0 {
                d_maps = Some(grads.into_iter().map(|g| g * cfg.beta).collect::<Vec<_>>());
            }
        }
    }
    let grads = net.backward_joint(&fwd, &d_pred, d_maps.as_deref())?;
    Ok((total_loss(diff, atal, cfg.beta)?, grads))
}

/// One SGD step on `batch`. Returns the batch-mean losses.
pub fn train_step(batch: &[BenchRecord], models: &mut Models, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(PainterError::domain("empty batch"));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let shared: &Models = models;
    let results = cfg
        .execution
        .map(batch, |i, record| record_grads(record, shared, cfg, seeds[i]).map_err(|e| e.with_record(&format!("batch[{i}] {}", record.id))));

    let inv = 1.0 / batch.len() as f64;
    let mut branch = ParamStore::new();
    let mut taps = ParamStore::new();
    let (mut diff, mut atal) = (0.0, 0.0);
    for res in results {
        let (loss, g) = res?;
        diff += loss.diff * inv;
        atal += loss.atal * inv;
        for (name, v) in g.branch.iter() {
            branch.accumulate(name, &(v * inv));
        }
        for (name, v) in g.taps.iter() {
            taps.accumulate(name, &(v * inv));
        }
    }
    models.net.apply_sgd(&BranchGrads { branch, taps }, cfg.lr)?;
    total_loss(diff, atal, cfg.beta)
}

/// Run `cfg.steps` steps, cycling through `data` in fixed order. Each step
/// is appended to `log` as one JSON line when given.
pub fn train(data: &[BenchRecord], models: &mut Models, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PainterError::domain("no training records"));
    }
    for r in data {
        r.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<BenchRecord> = (0..cfg.batch).map(|j| data[(step * cfg.batch + j) % data.len()].clone()).collect();
        let loss = train_step(&batch, models, cfg, &mut rng)?;
        let entry = StepLog {
            step,
            diff: loss.diff,
            atal: loss.atal,
            total: loss.total,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            writeln!(w).map_err(|e| PainterError::io("<training log>", e))?;
        }
        log::debug!("step {step}: diff {:.6} atal {:.6}", loss.diff, loss.atal);
        history.push(entry);
    }
    Ok(history)
}

/// The network is never mutated through the frozen base; this checks it.
pub fn base_digest(net: &DualBranchNet) -> String {
    net.base.digest()
}
