//! The fusion network: a four-level U-Net over the stacked infrared and
//! visible luminance channels. The level-1 and level-3 skip connections pass
//! through defensive refinement modules (DRM), each a chain of kernel
//! attention blocks (ARB) between a pixel-unshuffle and a pixel-shuffle; the
//! other two skips are plain copy-and-crop.

mod attention;
mod blocks;
mod config;
mod params;
mod unet;

pub use attention::{attend, kernel_attention, kernel_feature_map};
pub use blocks::{arb_forward, channel_norm, drm_forward};
pub use config::{AttentionConfig, AttentionMode, NetworkConfig, SigmaMode};
pub use params::{BoundParams, ModelParams};
pub use unet::{build_model, forward, init_scale, fuse, layer_specs, validate_params, LayerSpec, DRM_LEVELS};
