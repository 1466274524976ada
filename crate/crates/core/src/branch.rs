//! The control branch and its zero-initialised control points.
//!
//! The branch is a copy of the base denoiser whose input projection is
//! widened from 4 to 9 channels (noisy latent, masked-image latent, mask).
//! Every branch layer output and every branch cross-attention output is fed
//! through its own 1×1 projection, scaled by the preservation factor `w`, and
//! added into the frozen base network.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};
use crate::nn::denoiser::InjectionGrads;
use crate::nn::feature::{resample_to, resample_to_backward};
use crate::nn::{Denoiser, DenoiserSpec, FeatureMap, ForwardCache, Frozen, Injections, ParamStore, Seeds};
use crate::raster::SoftMask;

/// Channels of the branch input: `z_t`, masked-image latent, mask.
pub fn branch_in_channels(spec: &DenoiserSpec) -> usize {
    2 * spec.latent_channels + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationScale(f64);

impl PreservationScale {
    pub fn new(w: f64) -> Result<Self> {
        if !(w.is_finite() && w >= 0.0) {
            return Err(PainterError::domain(format!("preservation scale {w} must be finite and >= 0")));
        }
        Ok(Self(w))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for PreservationScale {
    fn default() -> Self {
        Self(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapSite {
    Layer,
    Attention,
}

/// Where a control point adds into the base network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    /// Layer taps: input of base layer `i`. Attention taps: input of base attention `i`.
    Pre,
    /// Layer taps: output of base layer `i`. Attention taps: output of base attention `i`.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapAnchoring {
    pub layer: Anchor,
    pub attention: Anchor,
}

impl Default for TapAnchoring {
    fn default() -> Self {
        Self {
            layer: Anchor::Pre,
            attention: Anchor::Post,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlPointTap {
    pub site: TapSite,
    pub index: usize,
}

impl ControlPointTap {
    fn prefix(&self) -> String {
        match self.site {
            TapSite::Layer => format!("lay{}", self.index),
            TapSite::Attention => format!("attn{}", self.index),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix())
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix())
    }

    /// `(out, in)` widths of the projection.
    pub fn projection_shape(&self, spec: &DenoiserSpec, anchoring: TapAnchoring) -> (usize, usize) {
        let width = spec.layers[self.index].width;
        match (self.site, anchoring.layer) {
            (TapSite::Layer, Anchor::Pre) => (spec.in_width(self.index), width),
            _ => (width, width),
        }
    }
}

/// One layer tap per layer and one attention tap per attention site.
pub fn expected_taps(spec: &DenoiserSpec) -> Vec<ControlPointTap> {
    let mut taps: Vec<_> = (0..spec.num_layers())
        .map(|index| ControlPointTap { site: TapSite::Layer, index })
        .collect();
    let mut sites: Vec<_> = spec.attention.iter().map(|a| a.layer).collect();
    sites.sort_unstable();
    taps.extend(sites.into_iter().map(|index| ControlPointTap { site: TapSite::Attention, index }));
    taps
}

/// Trainable state produced by [`init_branch`].
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInit {
    pub branch: ParamStore,
    pub taps: Vec<ControlPointTap>,
    pub tap_params: ParamStore,
}

/// Copy the base into a 9-channel branch and create zeroed control points.
pub fn init_branch(spec: &DenoiserSpec, base: &ParamStore, anchoring: TapAnchoring) -> Result<BranchInit> {
    spec.validate()?;
    spec.check_params(base, spec.latent_channels)?;
    let mut branch = base.clone();
    let stem = base.get("stem.w")?;
    let mut wide = Array2::zeros((stem.nrows(), branch_in_channels(spec)));
    wide.slice_mut(s![.., ..spec.latent_channels]).assign(stem);
    branch.insert("stem.w", wide);

    let taps = expected_taps(spec);
    let mut tap_params = ParamStore::new();
    for tap in &taps {
        let (o, i) = tap.projection_shape(spec, anchoring);
        tap_params.insert(tap.weight_name(), Array2::zeros((o, i)));
        tap_params.insert(tap.bias_name(), Array2::zeros((o, 1)));
    }
    Ok(BranchInit {
        branch,
        taps,
        tap_params,
    })
}

/// Inputs to the branch: noisy latent, masked-image latent, latent-size mask.
#[derive(Debug, Clone)]
pub struct BranchInput {
    pub z_t: FeatureMap,
    pub z0_masked: FeatureMap,
    pub mask: SoftMask,
}

impl BranchInput {
    pub fn new(z_t: FeatureMap, z0_masked: FeatureMap, mask: SoftMask) -> Result<Self> {
        if !z_t.same_shape(&z0_masked) {
            return Err(PainterError::shape("z_t and masked-image latent differ in shape"));
        }
        if mask.dims() != (z_t.h, z_t.w) {
            return Err(PainterError::shape(format!(
                "mask is {:?}, latent is {}x{}",
                mask.dims(),
                z_t.h,
                z_t.w
            )));
        }
        Ok(Self { z_t, z0_masked, mask })
    }

    pub fn concat(&self) -> Result<FeatureMap> {
        let m = FeatureMap::new(self.z_t.h, self.z_t.w, self.mask.0.clone().into_shape_with_order((1, self.z_t.pixels())).map_err(|e| PainterError::shape(e.to_string()))?)?;
        FeatureMap::concat_channels(&[&self.z_t, &self.z0_masked, &m])
    }
}

/// Base model, trainable branch and control points.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchNet {
    pub spec: DenoiserSpec,
    pub base: Frozen,
    pub branch: ParamStore,
    pub taps: Vec<ControlPointTap>,
    pub tap_params: ParamStore,
    pub anchoring: TapAnchoring,
}

/// Everything a joint forward produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct JointForward {
    pub pred: FeatureMap,
    pub branch: ForwardCache,
    pub base: ForwardCache,
    /// Per tap: the projected (unscaled, unresampled) branch feature.
    pub projected: Vec<Array2<f64>>,
    pub w: f64,
}

impl JointForward {
    /// Head-averaged branch attention maps, in layer order.
    pub fn attention_maps(&self) -> Vec<Array2<f64>> {
        self.branch.attention_maps().into_iter().map(|(_, m)| m).collect()
    }
}

/// Trainable-parameter gradients.
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub branch: ParamStore,
    pub taps: ParamStore,
}

impl DualBranchNet {
    pub fn new(spec: DenoiserSpec, base: ParamStore, anchoring: TapAnchoring) -> Result<Self> {
        let init = init_branch(&spec, &base, anchoring)?;
        Ok(Self {
            spec,
            base: Frozen::new(base),
            branch: init.branch,
            taps: init.taps,
            tap_params: init.tap_params,
            anchoring,
        })
    }

    /// Reassemble a network from stored parameters, validating every shape.
    pub fn from_parts(
        spec: DenoiserSpec,
        base: ParamStore,
        branch: ParamStore,
        tap_params: ParamStore,
        anchoring: TapAnchoring,
    ) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&base, spec.latent_channels)?;
        spec.check_params(&branch, branch_in_channels(&spec))?;
        let taps = expected_taps(&spec);
        let net = Self {
            spec,
            base: Frozen::new(base),
            branch,
            taps,
            tap_params,
            anchoring,
        };
        net.check_taps()?;
        if net.tap_params.len() != 2 * net.taps.len() {
            return Err(PainterError::shape("unexpected entries among tap parameters"));
        }
        Ok(net)
    }

    /// Freshly initialised toy network.
    pub fn toy(context_len: usize, seed: u64) -> Result<Self> {
        let spec = DenoiserSpec::toy(context_len);
        let base = spec.init_params(spec.latent_channels, seed);
        Self::new(spec, base, TapAnchoring::default())
    }

    pub fn base_net(&self) -> Denoiser<'_> {
        Denoiser::new(&self.spec, self.base.params())
    }

    pub fn branch_net(&self) -> Denoiser<'_> {
        Denoiser::new(&self.spec, &self.branch)
    }

    pub fn trainable_numel(&self) -> usize {
        self.branch.numel() + self.tap_params.numel()
    }

    /// Taps must be exactly one per layer plus one per attention site.
    pub fn check_taps(&self) -> Result<()> {
        let expected = expected_taps(&self.spec);
        for tap in &expected {
            if !self.taps.contains(tap) {
                return Err(PainterError::MissingTap(format!("{:?} {}", tap.site, tap.index)));
            }
            let (o, i) = tap.projection_shape(&self.spec, self.anchoring);
            let w = self.tap_params.get(&tap.weight_name()).map_err(|_| PainterError::MissingTap(tap.weight_name()))?;
            let b = self.tap_params.get(&tap.bias_name()).map_err(|_| PainterError::MissingTap(tap.bias_name()))?;
            if w.dim() != (o, i) || b.dim() != (o, 1) {
                return Err(PainterError::shape(format!("tap `{}` has the wrong shape", tap.weight_name())));
            }
        }
        if let Some(extra) = self.taps.iter().find(|t| !expected.contains(t)) {
            return Err(PainterError::MissingTap(format!("no site for {:?} {}", extra.site, extra.index)));
        }
        Ok(())
    }

    /// Base model alone on `z_t`.
    pub fn base_forward(&self, z_t: &FeatureMap, t: usize, ctx: &Array2<f64>) -> Result<FeatureMap> {
        let (pred, _) = self
            .base_net()
            .forward(z_t, t as f64, ctx, &Injections::none(self.spec.num_layers()))?;
        Ok(pred)
    }

    /// Branch alone; the cache holds `lay_i`, `attn_i` and attention maps.
    pub fn branch_forward(&self, input: &BranchInput, t: usize, ctx: &Array2<f64>) -> Result<ForwardCache> {
        let x = input.concat()?;
        let (_, cache) = self
            .branch_net()
            .forward(&x, t as f64, ctx, &Injections::none(self.spec.num_layers()))?;
        Ok(cache)
    }

    /// Branch cross-attention maps (`HW_i`×`L`, averaged over heads), one per site.
    pub fn capture_attention_maps(&self, input: &BranchInput, t: usize, ctx: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if self.spec.attention.is_empty() {
            return Err(PainterError::shape("branch has no attention sites"));
        }
        let cache = self.branch_forward(input, t, ctx)?;
        Ok(cache.attention_maps().into_iter().map(|(_, m)| m).collect())
    }

    /// Tap output before scaling, `Z(feature)`.
    fn project(&self, tap: &ControlPointTap, feature: &Array2<f64>) -> Result<Array2<f64>> {
        let w = self.tap_params.get(&tap.weight_name())?;
        let b = self.tap_params.get(&tap.bias_name())?;
        Ok(w.dot(feature) + b)
    }

    fn tap_feature<'c>(&self, tap: &ControlPointTap, cache: &'c ForwardCache) -> Result<&'c FeatureMap> {
        let layer = &cache.layers[tap.index];
        match tap.site {
            TapSite::Layer => Ok(&layer.out),
            TapSite::Attention => layer
                .attn
                .as_ref()
                .map(|_| &layer.out)
                .ok_or_else(|| PainterError::MissingTap(format!("layer {} has no attention", tap.index))),
        }
    }

    fn tap_source(&self, tap: &ControlPointTap, cache: &ForwardCache) -> Result<Array2<f64>> {
        match tap.site {
            TapSite::Layer => Ok(cache.layers[tap.index].out.data.clone()),
            TapSite::Attention => cache.layers[tap.index]
                .attn
                .as_ref()
                .map(|a| a.out.clone())
                .ok_or_else(|| PainterError::MissingTap(format!("layer {} has no attention", tap.index))),
        }
    }

    /// Spatial dims at the injection target of `tap` for an `h`×`w` latent.
    fn target_dims(&self, tap: &ControlPointTap, h: usize, w: usize) -> Result<(usize, usize)> {
        let dims = self.spec.layer_dims(h, w)?;
        let (input, output) = dims[tap.index];
        Ok(match (tap.site, self.anchoring.layer) {
            (TapSite::Layer, Anchor::Pre) => input,
            _ => output,
        })
    }

    /// Joint forward: branch on `[z_t, z0_m, m]`, then the frozen base on
    /// `z_t` with every tap adding `w · Z(tap output)`.
    pub fn forward_joint(&self, input: &BranchInput, t: usize, ctx: &Array2<f64>, w: PreservationScale) -> Result<JointForward> {
        self.check_taps()?;
        let n = self.spec.num_layers();
        let branch = self.branch_forward(input, t, ctx)?;
        let (h, wd) = (input.z_t.h, input.z_t.w);
        let mut inj = Injections::none(n);
        let mut projected = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let src = self.tap_source(tap, &branch)?;
            let fmap = self.tap_feature(tap, &branch)?;
            let z = self.project(tap, &src)?;
            let (th, tw) = self.target_dims(tap, h, wd)?;
            let zmap = FeatureMap::new(fmap.h, fmap.w, z.clone())?;
            let scaled = resample_to(&zmap, th, tw)?.data * w.get();
            let slot = match (tap.site, self.anchoring) {
                (TapSite::Layer, TapAnchoring { layer: Anchor::Pre, .. }) => &mut inj.layer_in[tap.index],
                (TapSite::Layer, _) => &mut inj.layer_out[tap.index],
                (TapSite::Attention, TapAnchoring { attention: Anchor::Pre, .. }) => &mut inj.attn_pre[tap.index],
                (TapSite::Attention, _) => &mut inj.attn_post[tap.index],
            };
            *slot = Some(match slot.take() {
                Some(prev) => prev + &scaled,
                None => scaled,
            });
            projected.push(z);
        }
        let (pred, base) = self.base_net().forward(&input.z_t, t as f64, ctx, &inj)?;
        Ok(JointForward {
            pred,
            branch,
            base,
            projected,
            w: w.get(),
        })
    }

    /// Gradients of the trainable parameters given `dL/dpred` and optional
    /// gradients on the branch's head-averaged attention maps (indexed like
    /// [`JointForward::attention_maps`]).
    pub fn backward_joint(&self, fwd: &JointForward, d_pred: &Array2<f64>, d_maps: Option<&[Array2<f64>]>) -> Result<BranchGrads> {
        let n = self.spec.num_layers();
        let mut base_seeds = Seeds::new(n);
        base_seeds.d_pred = Some(d_pred.clone());
        let (_, g): (_, InjectionGrads) = self.base_net().backward(&fwd.base, &base_seeds, false)?;

        let mut tap_grads = ParamStore::new();
        let mut seeds = Seeds::new(n);
        for tap in &self.taps {
            let src = self.tap_source(tap, &fwd.branch)?;
            let fmap = self.tap_feature(tap, &fwd.branch)?;
            let d_inj = match (tap.site, self.anchoring) {
                (TapSite::Layer, TapAnchoring { layer: Anchor::Pre, .. }) => Some(&g.layer_in[tap.index]),
                (TapSite::Layer, _) => Some(&g.layer_out[tap.index]),
                (TapSite::Attention, TapAnchoring { attention: Anchor::Pre, .. }) => g.attn_pre[tap.index].as_ref(),
                (TapSite::Attention, _) => g.attn_post[tap.index].as_ref(),
            }
            .ok_or_else(|| PainterError::MissingTap(format!("no gradient for {:?} {}", tap.site, tap.index)))?;
            let (th, tw) = self.target_dims(tap, fwd.pred.h, fwd.pred.w)?;
            let d_map = FeatureMap::new(th, tw, d_inj.clone())?;
            let d_z = resample_to_backward(&d_map, fmap.h, fmap.w).data * fwd.w;
            tap_grads.accumulate(&tap.weight_name(), &d_z.dot(&src.t()));
            tap_grads.accumulate(&tap.bias_name(), &d_z.sum_axis(Axis(1)).insert_axis(Axis(1)));
            let d_src = self.tap_params.get(&tap.weight_name())?.t().dot(&d_z);
            let slot = match tap.site {
                TapSite::Layer => &mut seeds.d_layer_out[tap.index],
                TapSite::Attention => &mut seeds.d_attn_out[tap.index],
            };
            *slot = Some(match slot.take() {
                Some(prev) => prev + &d_src,
                None => d_src,
            });
        }
        if let Some(maps) = d_maps {
            let sites: Vec<usize> = fwd.branch.attention_maps().into_iter().map(|(i, _)| i).collect();
            if maps.len() != sites.len() {
                return Err(PainterError::shape("attention-map gradients do not match the sites"));
            }
            for (site, dm) in sites.into_iter().zip(maps) {
                seeds.d_attn_map[site] = Some(dm.clone());
            }
        }
        let (branch_grads, _) = self.branch_net().backward(&fwd.branch, &seeds, true)?;
        Ok(BranchGrads {
            branch: branch_grads.expect("requested"),
            taps: tap_grads,
        })
    }

    /// Plain SGD on branch and taps. The base is untouched.
    pub fn apply_sgd(&mut self, grads: &BranchGrads, lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        self.branch.add_scaled(&grads.branch, -lr)?;
        self.tap_params.add_scaled(&grads.taps, -lr)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(h, w, Array2::from_shape_simple_fn((c, h * w), || StandardNormal.sample(&mut *rng))).unwrap()
    }

    fn toy_input(seed: u64) -> (BranchInput, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_t = gaussian(&mut rng, 4, 16, 16);
        let z0 = gaussian(&mut rng, 4, 16, 16);
        let mask = SoftMask(Array2::from_shape_fn((16, 16), |(y, x)| ((y / 4 + x / 4) % 2) as f64));
        let ctx = Array2::from_shape_simple_fn((32, 8), || StandardNormal.sample(&mut rng));
        (BranchInput::new(z_t, z0, mask).unwrap(), ctx)
    }

    #[test]
    fn toy_has_one_tap_per_site() {
        let net = DualBranchNet::toy(8, 1).unwrap();
        let layer = net.taps.iter().filter(|t| t.site == TapSite::Layer).count();
        let attn = net.taps.iter().filter(|t| t.site == TapSite::Attention).count();
        assert_eq!((layer, attn), (4, 1));
        assert_eq!(net.tap_params.max_abs(), 0.0);
    }

    #[test]
    fn widened_stem_matches_base_on_zero_extension() {
        let net = DualBranchNet::toy(8, 2).unwrap();
        let base = net.base.params().get("stem.w").unwrap();
        let wide = net.branch.get("stem.w").unwrap();
        let (input, _) = toy_input(3);
        let mut x = input.concat().unwrap().data;
        x.slice_mut(s![4.., ..]).fill(0.0);
        let a = base.dot(&input.z_t.data);
        let b = wide.dot(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_enumerates_shapes() {
        let net = DualBranchNet::toy(8, 4).unwrap();
        let spec = &net.spec;
        // independent count from the architecture description
        let mut base = 0;
        let w0 = spec.layers[0].width;
        base += w0 * 4 + w0;
        for (i, l) in spec.layers.iter().enumerate() {
            let win = if i == 0 { w0 } else { spec.layers[i - 1].width };
            base += l.width * win + l.width + l.width * spec.time_dim;
            if let Some(a) = spec.attention.iter().find(|a| a.layer == i) {
                let inner = a.heads * a.head_dim;
                base += inner * l.width + 2 * inner * spec.text_dim + l.width * inner;
            }
        }
        base += 4 * spec.layers[3].width + 4;
        assert_eq!(net.base.params().numel(), base);
        let widening = 5 * w0;
        let taps: usize = [(32, 32), (32, 32), (32, 32), (32, 32), (32, 32)].iter().map(|(o, i)| o * i + o).sum();
        assert_eq!(net.trainable_numel(), base + widening + taps);
    }

    #[test]
    fn init_rejects_mismatched_base() {
        let spec = DenoiserSpec::toy(8);
        let mut base = spec.init_params(4, 0);
        base.insert("stem.w", Array2::zeros((3, 4)));
        assert!(matches!(init_branch(&spec, &base, TapAnchoring::default()), Err(PainterError::Shape(_))));
    }

    #[test]
    fn fresh_taps_are_transparent_for_any_w() {
        let net = DualBranchNet::toy(8, 5).unwrap();
        for seed in 0..3 {
            let (input, ctx) = toy_input(seed);
            let base = net.base_forward(&input.z_t, 17, &ctx).unwrap();
            for w in [0.0, 1.0, 3.5] {
                let j = net.forward_joint(&input, 17, &ctx, PreservationScale::new(w).unwrap()).unwrap();
                assert_eq!(j.pred.max_abs_diff(&base), 0.0);
            }
        }
    }

    #[test]
    fn missing_tap_is_reported() {
        let mut net = DualBranchNet::toy(8, 5).unwrap();
        net.taps.pop();
        let (input, ctx) = toy_input(0);
        assert!(matches!(net.forward_joint(&input, 3, &ctx, PreservationScale::default()), Err(PainterError::MissingTap(_))));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let net = DualBranchNet::toy(8, 6).unwrap();
        let (input, ctx) = toy_input(9);
        let maps = net.capture_attention_maps(&input, 10, &ctx).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].dim(), (64, 8));
        for row in maps[0].rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    fn perturbed(seed: u64, anchoring: TapAnchoring) -> DualBranchNet {
        let spec = DenoiserSpec::toy(8);
        let base = spec.init_params(4, seed);
        let mut net = DualBranchNet::new(spec, base, anchoring).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let names: Vec<String> = net.tap_params.iter().map(|(k, _)| k.clone()).collect();
        for k in names {
            net.tap_params
                .get_mut(&k)
                .unwrap()
                .mapv_inplace(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.05 * z
                });
        }
        net
    }

    #[test]
    fn injected_term_is_linear_in_w() {
        let net = perturbed(7, TapAnchoring::default());
        let (input, ctx) = toy_input(1);
        let j1 = net.forward_joint(&input, 5, &ctx, PreservationScale::new(1.0).unwrap()).unwrap();
        let j2 = net.forward_joint(&input, 5, &ctx, PreservationScale::new(2.0).unwrap()).unwrap();
        // base layer-0 input = stem + w·Z; the stem part is identical in both runs
        let stem = j1.base.layers[0].input.data.clone() - &(j1.projected[0].clone());
        let twice = &j2.base.layers[0].input.data - &stem;
        let diff = (&twice - &(j1.projected[0].clone() * 2.0)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
    }

    fn joint_objective(net: &DualBranchNet, input: &BranchInput, ctx: &Array2<f64>, probe: &Array2<f64>, map_probe: &Array2<f64>) -> f64 {
        let j = net.forward_joint(input, 9, ctx, PreservationScale::new(0.7).unwrap()).unwrap();
        (&j.pred.data * probe).sum() + (&j.attention_maps()[0] * map_probe).sum()
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        for anchoring in [
            TapAnchoring::default(),
            TapAnchoring { layer: Anchor::Post, attention: Anchor::Pre },
        ] {
            let net = perturbed(11, anchoring);
            let (input, ctx) = toy_input(4);
            let probe = Array2::from_shape_fn((4, 256), |(i, j)| ((i * 17 + j) as f64 * 0.13).sin());
            let map_probe = Array2::from_shape_fn((64, 8), |(i, j)| ((i + 5 * j) as f64 * 0.29).cos());
            let j = net.forward_joint(&input, 9, &ctx, PreservationScale::new(0.7).unwrap()).unwrap();
            let grads = net.backward_joint(&j, &probe, Some(std::slice::from_ref(&map_probe))).unwrap();
            let h = 1e-6;
            let mut checked = 0;
            for (store_is_tap, name) in [
                (true, "lay0.w"),
                (true, "lay1.b"),
                (true, "lay2.w"),
                (true, "attn1.w"),
                (false, "stem.w"),
                (false, "layer1.attn.q"),
                (false, "layer1.attn.k"),
                (false, "layer3.w"),
            ] {
                let g = if store_is_tap { grads.taps.get(name).unwrap() } else { grads.branch.get(name).unwrap() };
                let cols = g.ncols();
                for idx in [0, g.len() / 3, g.len() - 1] {
                    let (r, c) = (idx / cols, idx % cols);
                    let bump = |delta: f64| {
                        let mut n2 = net.clone();
                        let store = if store_is_tap { &mut n2.tap_params } else { &mut n2.branch };
                        store.get_mut(name).unwrap()[[r, c]] += delta;
                        joint_objective(&n2, &input, &ctx, &probe, &map_probe)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    let analytic = g[[r, c]];
                    let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
                    assert!(err < 1e-4, "{anchoring:?} {name}[{r},{c}] analytic {analytic} numeric {numeric}");
                    checked += 1;
                }
            }
            assert_eq!(checked, 24);
        }
    }
}
