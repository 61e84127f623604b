//! Velocity networks with per-block feature taps, and discriminator heads
//! that read those taps.

mod denoiser;
mod heads;
mod params;

pub use denoiser::{
    spatial_to_tokens, tokens_to_spatial, ArchKind, DenoiserArch, DenoiserParams, FeatureLayout, FeatureStack,
};
pub use heads::{DiscHeadSet, HeadConfig};
pub use params::{fourier_features, Bound, ParamStore};
