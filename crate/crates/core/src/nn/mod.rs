//! Minimal tensor plumbing and the toy denoiser.

pub mod denoiser;
pub mod feature;
pub mod params;

pub use denoiser::{
    softmax_rows, timestep_embedding, AttentionSite, Denoiser, DenoiserSpec, ForwardCache, Injections,
    LayerSpec, Resample, Seeds,
};
pub use feature::{FeatureMap, LatentTensor};
pub use params::{Frozen, ParamStore};
