//! A small U-Net-shaped noise predictor built from 1×1 convolutions,
//! pooling/upsampling and multi-head cross-attention, with hand-written
//! reverse-mode gradients.
//!
//! The same network serves as the frozen base model and, with a wider input
//! projection, as the trainable control branch. Forward passes accept
//! additive injections at four kinds of sites so that branch features can be
//! routed into the base.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::feature::{resample_to, resample_to_backward, FeatureMap};
use super::params::ParamStore;
use crate::error::{PainterError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    Same,
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub resample: Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSite {
    pub layer: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionSite {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Architecture of a denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub context_len: usize,
    pub vocab_size: u32,
    pub text_seed: u64,
    pub layers: Vec<LayerSpec>,
    pub attention: Vec<AttentionSite>,
}

impl DenoiserSpec {
    /// Desk-scale preset: 4×16×16 latent, four layers, one attention site.
    pub fn toy(context_len: usize) -> Self {
        Self {
            latent_channels: 4,
            latent_h: 16,
            latent_w: 16,
            time_dim: 16,
            text_dim: 32,
            context_len,
            vocab_size: 4096,
            text_seed: 0x7e57,
            layers: vec![
                LayerSpec { width: 32, resample: Resample::Same },
                LayerSpec { width: 32, resample: Resample::Down },
                LayerSpec { width: 32, resample: Resample::Up },
                LayerSpec { width: 32, resample: Resample::Same },
            ],
            attention: vec![AttentionSite { layer: 1, heads: 1, head_dim: 32 }],
        }
    }

    /// Shape contract for attaching a Stable-Diffusion-1.5-sized base
    /// checkpoint; parameters must be supplied from an archive.
    pub fn sd15_adapter() -> Self {
        let mut layers = Vec::new();
        for (w, r) in [
            (320, Resample::Same),
            (640, Resample::Down),
            (1280, Resample::Down),
            (1280, Resample::Same),
            (640, Resample::Up),
            (320, Resample::Up),
        ] {
            layers.push(LayerSpec { width: w, resample: r });
        }
        let attention = [0usize, 1, 2, 4, 5]
            .iter()
            .map(|&layer| AttentionSite { layer, heads: 8, head_dim: layers[layer].width / 8 })
            .collect();
        Self {
            latent_channels: 4,
            latent_h: 64,
            latent_w: 64,
            time_dim: 320,
            text_dim: 768,
            context_len: 77,
            vocab_size: 49408,
            text_seed: 0,
            layers,
            attention,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn attention_at(&self, layer: usize) -> Option<&AttentionSite> {
        self.attention.iter().find(|a| a.layer == layer)
    }

    /// Width of the feature entering layer `i`.
    pub fn in_width(&self, i: usize) -> usize {
        if i == 0 {
            self.layers[0].width
        } else {
            self.layers[i - 1].width
        }
    }

    /// Spatial dims of layer inputs and outputs for an `h`×`w` latent.
    pub fn layer_dims(&self, h: usize, w: usize) -> Result<Vec<((usize, usize), (usize, usize))>> {
        let mut cur = (h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let input = cur;
            cur = match l.resample {
                Resample::Same => cur,
                Resample::Down => {
                    if cur.0 % 2 != 0 || cur.1 % 2 != 0 || cur.0 < 2 || cur.1 < 2 {
                        return Err(PainterError::shape(format!("layer {i} cannot pool {}x{}", cur.0, cur.1)));
                    }
                    (cur.0 / 2, cur.1 / 2)
                }
                Resample::Up => (cur.0 * 2, cur.1 * 2),
            };
            out.push((input, cur));
        }
        if cur != (h, w) {
            return Err(PainterError::shape(format!(
                "network maps {h}x{w} to {}x{}; downs and ups must balance",
                cur.0, cur.1
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PainterError::shape("denoiser needs at least one layer"));
        }
        if self.layers.iter().any(|l| l.width == 0) || self.latent_channels == 0 || self.context_len < 2 {
            return Err(PainterError::shape("zero-sized dimension in denoiser spec"));
        }
        if self.time_dim % 2 != 0 {
            return Err(PainterError::shape("time_dim must be even"));
        }
        let n = self.layers.len();
        let mut seen = vec![false; n];
        for a in &self.attention {
            if a.layer >= n {
                return Err(PainterError::shape(format!("attention site at layer {} but N = {n}", a.layer)));
            }
            if seen[a.layer] {
                return Err(PainterError::shape(format!("duplicate attention site at layer {}", a.layer)));
            }
            if a.heads == 0 || a.head_dim == 0 {
                return Err(PainterError::shape("attention site needs heads and head_dim >= 1"));
            }
            seen[a.layer] = true;
        }
        self.layer_dims(self.latent_h, self.latent_w)?;
        Ok(())
    }

    /// Expected parameter names and shapes for a network with `in_channels` inputs.
    pub fn param_shapes(&self, in_channels: usize) -> Vec<(String, (usize, usize))> {
        let mut v = vec![
            ("stem.w".to_owned(), (self.layers[0].width, in_channels)),
            ("stem.b".to_owned(), (self.layers[0].width, 1)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layer{i}.w"), (l.width, self.in_width(i))));
            v.push((format!("layer{i}.b"), (l.width, 1)));
            v.push((format!("layer{i}.t"), (l.width, self.time_dim)));
            if let Some(a) = self.attention_at(i) {
                v.push((format!("layer{i}.attn.q"), (a.inner(), l.width)));
                v.push((format!("layer{i}.attn.k"), (a.inner(), self.text_dim)));
                v.push((format!("layer{i}.attn.v"), (a.inner(), self.text_dim)));
                v.push((format!("layer{i}.attn.o"), (l.width, a.inner())));
            }
        }
        let last = self.layers.last().expect("validated nonempty").width;
        v.push(("head.w".to_owned(), (self.latent_channels, last)));
        v.push(("head.b".to_owned(), (self.latent_channels, 1)));
        v
    }

    /// Seeded scaled-Gaussian initialisation.
    pub fn init_params(&self, in_channels: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, (r, c)) in self.param_shapes(in_channels) {
            let t = if name.ends_with(".b") {
                Array2::zeros((r, c))
            } else {
                let gain = if name.starts_with("head") { 0.5 } else { 1.0 };
                let scale = gain / (c as f64).sqrt();
                Array2::from_shape_simple_fn((r, c), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
            };
            store.insert(name, t);
        }
        store
    }

    pub fn check_params(&self, params: &ParamStore, in_channels: usize) -> Result<()> {
        let expected = self.param_shapes(in_channels);
        if params.len() != expected.len() {
            return Err(PainterError::shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params.get(&name)?;
            if t.dim() != shape {
                return Err(PainterError::shape(format!(
                    "parameter `{name}` is {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal timestep embedding.
pub fn timestep_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[2 * k] = (t * freq).sin();
        out[2 * k + 1] = (t * freq).cos();
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise softmax of a `P`×`L` score matrix.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// Additive injections per layer; `None` means nothing is added.
#[derive(Debug, Clone, Default)]
pub struct Injections {
    pub layer_in: Vec<Option<Array2<f64>>>,
    pub layer_out: Vec<Option<Array2<f64>>>,
    pub attn_pre: Vec<Option<Array2<f64>>>,
    pub attn_post: Vec<Option<Array2<f64>>>,
}

impl Injections {
    pub fn none(n: usize) -> Self {
        Self {
            layer_in: vec![None; n],
            layer_out: vec![None; n],
            attn_pre: vec![None; n],
            attn_post: vec![None; n],
        }
    }
}

fn add_opt(x: &mut Array2<f64>, inj: Option<&Option<Array2<f64>>>, what: &str, layer: usize) -> Result<()> {
    if let Some(Some(v)) = inj {
        if v.dim() != x.dim() {
            return Err(PainterError::shape(format!(
                "{what} injection at layer {layer} is {:?}, expected {:?}",
                v.dim(),
                x.dim()
            )));
        }
        *x += v;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    pub input: Array2<f64>,
    pub q: Vec<Array2<f64>>,
    pub k: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    /// Per-head attention probabilities, `P`×`L`.
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
    /// Attention block output before any post injection.
    pub out: Array2<f64>,
}

impl AttnCache {
    /// Head-averaged attention map.
    pub fn mean_map(&self) -> Array2<f64> {
        let mut acc = self.probs[0].clone();
        for p in &self.probs[1..] {
            acc += p;
        }
        acc / self.probs.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: FeatureMap,
    pub x: FeatureMap,
    pub pre: Array2<f64>,
    pub residual: bool,
    pub attn: Option<AttnCache>,
    /// Layer output, including any output injection.
    pub out: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: FeatureMap,
    pub temb: Array1<f64>,
    pub ctx: Array2<f64>,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn attention_maps(&self) -> Vec<(usize, Array2<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.attn.as_ref().map(|a| (i, a.mean_map())))
            .collect()
    }
}

/// Gradient seeds entering a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Seeds {
    pub d_pred: Option<Array2<f64>>,
    pub d_layer_out: Vec<Option<Array2<f64>>>,
    pub d_attn_out: Vec<Option<Array2<f64>>>,
    /// Gradient with respect to the head-averaged attention map.
    pub d_attn_map: Vec<Option<Array2<f64>>>,
}

impl Seeds {
    pub fn new(n: usize) -> Self {
        Self {
            d_pred: None,
            d_layer_out: vec![None; n],
            d_attn_out: vec![None; n],
            d_attn_map: vec![None; n],
        }
    }
}

/// Gradients with respect to each injection site.
#[derive(Debug, Clone)]
pub struct InjectionGrads {
    pub layer_in: Vec<Array2<f64>>,
    pub layer_out: Vec<Array2<f64>>,
    pub attn_pre: Vec<Option<Array2<f64>>>,
    pub attn_post: Vec<Option<Array2<f64>>>,
}

/// A denoiser bound to its spec and parameters.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a> {
    pub spec: &'a DenoiserSpec,
    pub params: &'a ParamStore,
}

impl<'a> Denoiser<'a> {
    pub fn new(spec: &'a DenoiserSpec, params: &'a ParamStore) -> Self {
        Self { spec, params }
    }

    fn p(&self, name: &str) -> Result<&'a Array2<f64>> {
        self.params.get(name)
    }

    pub fn in_channels(&self) -> Result<usize> {
        Ok(self.p("stem.w")?.ncols())
    }

    /// Forward pass returning the noise prediction and the activation cache.
    pub fn forward(
        &self,
        input: &FeatureMap,
        t: f64,
        ctx: &Array2<f64>,
        inj: &Injections,
    ) -> Result<(FeatureMap, ForwardCache)> {
        let spec = self.spec;
        let stem_w = self.p("stem.w")?;
        if input.channels() != stem_w.ncols() {
            return Err(PainterError::shape(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                stem_w.ncols()
            )));
        }
        if ctx.nrows() != spec.text_dim {
            return Err(PainterError::shape(format!(
                "text context has dim {}, expected {}",
                ctx.nrows(),
                spec.text_dim
            )));
        }
        spec.layer_dims(input.h, input.w)?;
        let temb = timestep_embedding(t, spec.time_dim);

        let mut cur = FeatureMap {
            h: input.h,
            w: input.w,
            data: stem_w.dot(&input.data) + self.p("stem.b")?,
        };
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, l) in spec.layers.iter().enumerate() {
            let mut inp = cur;
            add_opt(&mut inp.data, inj.layer_in.get(i), "layer input", i)?;
            let x = match l.resample {
                Resample::Same => inp.clone(),
                Resample::Down => resample_to(&inp, inp.h / 2, inp.w / 2)?,
                Resample::Up => resample_to(&inp, inp.h * 2, inp.w * 2)?,
            };
            let tproj = self.p(&format!("layer{i}.t"))?.dot(&temb);
            let bias = self.p(&format!("layer{i}.b"))?.column(0).to_owned() + &tproj;
            let mut pre = self.p(&format!("layer{i}.w"))?.dot(&x.data);
            pre += &bias.insert_axis(Axis(1));
            let act = pre.mapv(silu);
            let residual = x.channels() == l.width;
            let mut y = if residual { &x.data + &act } else { act };

            let attn = match spec.attention_at(i) {
                Some(site) => {
                    add_opt(&mut y, inj.attn_pre.get(i), "attention input", i)?;
                    let cache = self.attention_forward(i, site, &y, ctx)?;
                    let mut total = cache.out.clone();
                    add_opt(&mut total, inj.attn_post.get(i), "attention output", i)?;
                    y += &total;
                    Some(cache)
                }
                None => None,
            };
            add_opt(&mut y, inj.layer_out.get(i), "layer output", i)?;
            let out = FeatureMap { h: x.h, w: x.w, data: y };
            cur = out.clone();
            layers.push(LayerCache {
                input: inp,
                x,
                pre,
                residual,
                attn,
                out,
            });
        }
        let pred = FeatureMap {
            h: cur.h,
            w: cur.w,
            data: self.p("head.w")?.dot(&cur.data) + self.p("head.b")?,
        };
        Ok((
            pred,
            ForwardCache {
                input: input.clone(),
                temb,
                ctx: ctx.clone(),
                layers,
            },
        ))
    }

    fn attention_forward(&self, i: usize, site: &AttentionSite, y: &Array2<f64>, ctx: &Array2<f64>) -> Result<AttnCache> {
        let wq = self.p(&format!("layer{i}.attn.q"))?;
        let wk = self.p(&format!("layer{i}.attn.k"))?;
        let wv = self.p(&format!("layer{i}.attn.v"))?;
        let wo = self.p(&format!("layer{i}.attn.o"))?;
        let d = site.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let q_all = wq.dot(y);
        let k_all = wk.dot(ctx);
        let v_all = wv.dot(ctx);
        let mut q = Vec::with_capacity(site.heads);
        let mut k = Vec::with_capacity(site.heads);
        let mut v = Vec::with_capacity(site.heads);
        let mut probs = Vec::with_capacity(site.heads);
        let mut concat = Array2::zeros((site.inner(), y.ncols()));
        for h in 0..site.heads {
            let rows = s![h * d..(h + 1) * d, ..];
            let qh = q_all.slice(rows).to_owned();
            let kh = k_all.slice(rows).to_owned();
            let vh = v_all.slice(rows).to_owned();
            let scores = qh.t().dot(&kh) * scale;
            let a = softmax_rows(&scores);
            concat.slice_mut(rows).assign(&vh.dot(&a.t()));
            q.push(qh);
            k.push(kh);
            v.push(vh);
            probs.push(a);
        }
        let out = wo.dot(&concat);
        Ok(AttnCache {
            input: y.clone(),
            q,
            k,
            v,
            probs,
            concat,
            out,
        })
    }

    /// Backward pass. Parameter gradients are only produced when
    /// `want_param_grads` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        seeds: &Seeds,
        want_param_grads: bool,
    ) -> Result<(Option<ParamStore>, InjectionGrads)> {
        let spec = self.spec;
        let n = spec.num_layers();
        let mut grads = ParamStore::new();
        let last = &cache.layers[n - 1].out;
        let mut d_cur = Array2::<f64>::zeros(last.data.raw_dim());
        if let Some(dp) = &seeds.d_pred {
            if dp.dim() != (spec.latent_channels, last.pixels()) {
                return Err(PainterError::shape("prediction gradient has the wrong shape"));
            }
            d_cur = self.p("head.w")?.t().dot(dp);
            if want_param_grads {
                grads.accumulate("head.w", &dp.dot(&last.data.t()));
                grads.accumulate("head.b", &dp.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
        } else if want_param_grads {
            grads.accumulate("head.w", &Array2::zeros(self.p("head.w")?.raw_dim()));
            grads.accumulate("head.b", &Array2::zeros(self.p("head.b")?.raw_dim()));
        }

        let mut g_layer_in = vec![Array2::zeros((0, 0)); n];
        let mut g_layer_out = vec![Array2::zeros((0, 0)); n];
        let mut g_attn_pre = vec![None; n];
        let mut g_attn_post = vec![None; n];

        for i in (0..n).rev() {
            let lc = &cache.layers[i];
            if let Some(Some(s)) = seeds.d_layer_out.get(i) {
                d_cur += s;
            }
            g_layer_out[i] = d_cur.clone();
            let mut d_y = d_cur;
            if let (Some(site), Some(ac)) = (spec.attention_at(i), lc.attn.as_ref()) {
                g_attn_post[i] = Some(d_y.clone());
                let mut d_attn = d_y.clone();
                if let Some(Some(s)) = seeds.d_attn_out.get(i) {
                    d_attn += s;
                }
                let d_map = seeds.d_attn_map.get(i).and_then(|m| m.as_ref());
                let d_in = self.attention_backward(i, site, ac, &cache.ctx, &d_attn, d_map, want_param_grads, &mut grads)?;
                d_y += &d_in;
                g_attn_pre[i] = Some(d_y.clone());
            }
            let d_pre = &d_y * &lc.pre.mapv(silu_grad);
            let w = self.p(&format!("layer{i}.w"))?;
            let mut d_x = w.t().dot(&d_pre);
            if lc.residual {
                d_x += &d_y;
            }
            if want_param_grads {
                let d_bias = d_pre.sum_axis(Axis(1));
                grads.accumulate(&format!("layer{i}.w"), &d_pre.dot(&lc.x.data.t()));
                grads.accumulate(&format!("layer{i}.t"), &outer(&d_bias, &cache.temb));
                grads.accumulate(&format!("layer{i}.b"), &d_bias.insert_axis(Axis(1)));
            }
            let d_xmap = FeatureMap { h: lc.x.h, w: lc.x.w, data: d_x };
            let d_input = resample_to_backward(&d_xmap, lc.input.h, lc.input.w).data;
            g_layer_in[i] = d_input.clone();
            d_cur = d_input;
        }

        if want_param_grads {
            grads.accumulate("stem.w", &d_cur.dot(&cache.input.data.t()));
            grads.accumulate("stem.b", &d_cur.sum_axis(Axis(1)).insert_axis(Axis(1)));
        }
        Ok((
            want_param_grads.then_some(grads),
            InjectionGrads {
                layer_in: g_layer_in,
                layer_out: g_layer_out,
                attn_pre: g_attn_pre,
                attn_post: g_attn_post,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        i: usize,
        site: &AttentionSite,
        ac: &AttnCache,
        ctx: &Array2<f64>,
        d_out: &Array2<f64>,
        d_map: Option<&Array2<f64>>,
        want: bool,
        grads: &mut ParamStore,
    ) -> Result<Array2<f64>> {
        let wq = self.p(&format!("layer{i}.attn.q"))?;
        let wo = self.p(&format!("layer{i}.attn.o"))?;
        let d = site.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let d_concat = wo.t().dot(d_out);
        let mut d_q_all = Array2::zeros((site.inner(), ac.input.ncols()));
        let mut d_k_all = Array2::zeros((site.inner(), ctx.ncols()));
        let mut d_v_all = Array2::zeros((site.inner(), ctx.ncols()));
        for h in 0..site.heads {
            let rows = s![h * d..(h + 1) * d, ..];
            let d_oh = d_concat.slice(rows);
            let a = &ac.probs[h];
            // out_h = v_h · aᵀ
            let d_vh = d_oh.dot(a);
            let mut d_a = d_oh.t().dot(&ac.v[h]);
            if let Some(dm) = d_map {
                d_a.scaled_add(1.0 / site.heads as f64, dm);
            }
            // softmax backward, row-wise
            let row_dot = (&d_a * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = a * &(&d_a - &row_dot);
            let d_qh = ac.k[h].dot(&d_scores.t()) * scale;
            let d_kh = ac.q[h].dot(&d_scores) * scale;
            d_q_all.slice_mut(rows).assign(&d_qh);
            d_k_all.slice_mut(rows).assign(&d_kh);
            d_v_all.slice_mut(rows).assign(&d_vh);
        }
        if want {
            grads.accumulate(&format!("layer{i}.attn.o"), &d_out.dot(&ac.concat.t()));
            grads.accumulate(&format!("layer{i}.attn.q"), &d_q_all.dot(&ac.input.t()));
            grads.accumulate(&format!("layer{i}.attn.k"), &d_k_all.dot(&ctx.t()));
            grads.accumulate(&format!("layer{i}.attn.v"), &d_v_all.dot(&ctx.t()));
        }
        Ok(wq.t().dot(&d_q_all))
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_spec() -> DenoiserSpec {
        DenoiserSpec {
            latent_channels: 2,
            latent_h: 4,
            latent_w: 4,
            time_dim: 4,
            text_dim: 3,
            context_len: 5,
            vocab_size: 16,
            text_seed: 1,
            layers: vec![
                LayerSpec { width: 3, resample: Resample::Same },
                LayerSpec { width: 4, resample: Resample::Down },
                LayerSpec { width: 3, resample: Resample::Up },
            ],
            attention: vec![AttentionSite { layer: 1, heads: 2, head_dim: 2 }],
        }
    }

    fn inputs(spec: &DenoiserSpec, c: usize) -> (FeatureMap, Array2<f64>) {
        let x = FeatureMap {
            h: spec.latent_h,
            w: spec.latent_w,
            data: Array2::from_shape_fn((c, spec.latent_h * spec.latent_w), |(i, j)| ((i * 13 + j * 5) as f64 * 0.31).sin()),
        };
        let ctx = Array2::from_shape_fn((spec.text_dim, spec.context_len), |(i, j)| ((i * 7 + j * 3) as f64 * 0.57).cos());
        (x, ctx)
    }

    fn objective(net: &Denoiser, x: &FeatureMap, ctx: &Array2<f64>, probe: &Array2<f64>, map_probe: &Array2<f64>) -> f64 {
        let (pred, cache) = net.forward(x, 3.0, ctx, &Injections::none(net.spec.num_layers())).unwrap();
        let maps = cache.attention_maps();
        (&pred.data * probe).sum() + (&maps[0].1 * map_probe).sum()
    }

    #[test]
    fn spec_validation() {
        assert!(DenoiserSpec::toy(77).validate().is_ok());
        assert!(DenoiserSpec::sd15_adapter().validate().is_ok());
        let mut bad = small_spec();
        bad.attention[0].layer = 3;
        assert!(bad.validate().is_err());
        let mut bad = small_spec();
        bad.layers.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let spec = small_spec();
        let params = spec.init_params(3, 11);
        let (x, ctx) = inputs(&spec, 3);
        let probe = Array2::from_shape_fn((2, 16), |(i, j)| ((i + 2 * j) as f64 * 0.7).sin());
        let map_probe = Array2::from_shape_fn((4, 5), |(i, j)| ((3 * i + j) as f64 * 0.4).cos());

        let net = Denoiser::new(&spec, &params);
        let (_, cache) = net.forward(&x, 3.0, &ctx, &Injections::none(3)).unwrap();
        let mut seeds = Seeds::new(3);
        seeds.d_pred = Some(probe.clone());
        seeds.d_attn_map[1] = Some(map_probe.clone());
        let (grads, _) = net.backward(&cache, &seeds, true).unwrap();
        let grads = grads.unwrap();

        let h = 1e-6;
        for (name, t) in params.iter() {
            for idx in [0usize, t.len() / 2, t.len() - 1] {
                let (r, c) = (idx / t.ncols(), idx % t.ncols());
                let mut plus = params.clone();
                plus.get_mut(name).unwrap()[[r, c]] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap()[[r, c]] -= h;
                let fp = objective(&Denoiser::new(&spec, &plus), &x, &ctx, &probe, &map_probe);
                let fm = objective(&Denoiser::new(&spec, &minus), &x, &ctx, &probe, &map_probe);
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.get(name).unwrap()[[r, c]];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{r},{c}]: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn injection_gradients_match_finite_differences() {
        let spec = small_spec();
        let params = spec.init_params(3, 5);
        let (x, ctx) = inputs(&spec, 3);
        let net = Denoiser::new(&spec, &params);
        let probe = Array2::from_shape_fn((2, 16), |(i, j)| ((i * 3 + j) as f64 * 0.3).cos());
        let (_, cache) = net.forward(&x, 7.0, &ctx, &Injections::none(3)).unwrap();
        let mut seeds = Seeds::new(3);
        seeds.d_pred = Some(probe.clone());
        let (_, g) = net.backward(&cache, &seeds, false).unwrap();

        let f = |inj: &Injections| {
            let (pred, _) = net.forward(&x, 7.0, &ctx, inj).unwrap();
            (&pred.data * &probe).sum()
        };
        let h = 1e-6;
        let check = |site: &str, layer: usize, shape: (usize, usize), analytic: &Array2<f64>| {
            for idx in [0usize, shape.0 * shape.1 / 2, shape.0 * shape.1 - 1] {
                let (r, c) = (idx / shape.1, idx % shape.1);
                let mk = |delta: f64| {
                    let mut inj = Injections::none(3);
                    let mut e = Array2::zeros(shape);
                    e[[r, c]] = delta;
                    match site {
                        "in" => inj.layer_in[layer] = Some(e),
                        "out" => inj.layer_out[layer] = Some(e),
                        "pre" => inj.attn_pre[layer] = Some(e),
                        _ => inj.attn_post[layer] = Some(e),
                    }
                    inj
                };
                let numeric = (f(&mk(h)) - f(&mk(-h))) / (2.0 * h);
                assert!((numeric - analytic[[r, c]]).abs() < 1e-6 * numeric.abs().max(1.0), "{site}{layer}");
            }
        };
        for i in 0..3 {
            let lc = &cache.layers[i];
            check("in", i, lc.input.data.dim(), &g.layer_in[i]);
            check("out", i, lc.out.data.dim(), &g.layer_out[i]);
        }
        let ad = cache.layers[1].out.data.dim();
        check("pre", 1, ad, g.attn_pre[1].as_ref().unwrap());
        check("post", 1, ad, g.attn_post[1].as_ref().unwrap());
    }
}
