use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the kernel bandwidth σ of the attention feature map is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Population variance of the token matrix being mapped.
    PerTensorVariance,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// `m(Q) · softmax(m(K)ᵀV / √d_s)`, softmax over the feature axis.
    SoftmaxContext,
    /// `m(Q)(m(K)ᵀV) / (m(Q)(m(K)ᵀ1) + 1e-8)`.
    PhiNormalized,
    /// `(m(Q)m(K)ᵀ)V` materialised at quadratic cost. Analysis only.
    DenseReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Number of non-constant Taylor terms kept in the feature map.
    pub taylor_order: usize,
    pub sigma_mode: SigmaMode,
    pub sigma_floor: f64,
    /// Softmax temperature; `None` means the expanded feature width.
    pub d_s: Option<f64>,
    pub mode: AttentionMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            taylor_order: 2,
            sigma_mode: SigmaMode::PerTensorVariance,
            sigma_floor: 1e-6,
            d_s: None,
            mode: AttentionMode::SoftmaxContext,
        }
    }
}

impl AttentionConfig {
    pub const MAX_TAYLOR_ORDER: usize = 6;

    pub fn validate(&self) -> Result<()> {
        if self.taylor_order > Self::MAX_TAYLOR_ORDER {
            return Err(Error::validation(format!(
                "attention.taylor_order = {} exceeds {}",
                self.taylor_order,
                Self::MAX_TAYLOR_ORDER
            )));
        }
        if let Some(d) = self.d_s {
            if !(d > 0.0) {
                return Err(Error::validation(format!("attention.d_s = {d} must be positive")));
            }
        }
        if let SigmaMode::Fixed(s) = self.sigma_mode {
            if !(s > 0.0) {
                return Err(Error::validation(format!("attention sigma {s} must be positive")));
            }
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::validation("attention.sigma_floor must be positive"));
        }
        Ok(())
    }

    /// Expanded feature width for `channels` input channels.
    pub fn feature_width(&self, channels: usize) -> usize {
        channels * (self.taylor_order + 1)
    }

    pub fn scale_dim(&self, channels: usize) -> f64 {
        self.d_s
            .unwrap_or_else(|| self.feature_width(channels) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub attention: AttentionConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            attention: AttentionConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub const LEVELS: usize = 4;
    pub const DRM_BLOCKS: usize = 5;
    pub const LEAKY_SLOPE: f64 = 0.2;
    /// Input extents must be multiples of this.
    pub const SIZE_MULTIPLE: usize = 1 << Self::LEVELS;

    pub fn with_base(base_channels: usize) -> Self {
        Self {
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 || self.base_channels % 4 != 0 {
            return Err(Error::validation(format!(
                "network.base_channels = {} must be at least 4 and divisible by 4",
                self.base_channels
            )));
        }
        self.attention.validate()
    }

    /// Channel width of encoder level `k` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }
}
