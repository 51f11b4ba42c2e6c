//! Bilateral attention in the joint motion-appearance neighbourhood.
//!
//! Each query token carries a scalar bilateral coordinate `E` (learned from
//! appearance and motion features). A key is admitted for a query when it is
//! inside the query's `(2·W_d+1)²` spatial window *and* its rank among the
//! window's sorted `E` values is within `W_b` of the query's own rank. The
//! attention kernels then softmax only over admitted keys.
//!
//! Three interchangeable forms are provided:
//!
//! * [`bi_attn_exact`] materializes each dense score row and softmaxes over
//!   admitted keys;
//! * [`bi_attn_additive`] is the trainable relaxation: admitted scores get the
//!   key's `E` added, the rest get `−L`, and a plain softmax runs over all
//!   keys so gradients reach `E`;
//! * [`bi_attn_windowed`] gathers only admitted keys; its cost is linear in
//!   the number of query tokens.

mod encoding;
mod kernels;
mod mask;
pub mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use encoding::{encode_bilateral_space, BilateralEncoding};
pub use kernels::{
    additive_weights, bi_attn_additive, bi_attn_exact, bi_attn_windowed, global_attention, multi_head_bi_attn,
    HeadProjections,
};
pub use mask::{build_bilateral_mask, spatial_window_mask, BilateralMask};

/// Suppression constant for non-admitted keys in the additive form.
/// `exp(−1e4)` underflows to zero in `f64`.
pub const DEFAULT_SUPPRESSION: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Spatial half-window `W_d`, in tokens.
    pub spatial_window: usize,
    /// Bilateral rank window `W_b`.
    pub bilateral_window: usize,
    /// `L`, the additive penalty for non-admitted keys.
    pub suppression: f64,
    pub num_heads: usize,
    pub head_dim: usize,
    pub channels: usize,
}

impl AttentionConfig {
    /// Full-scale setting: `W_d = 7`, `W_b = 84`, eight heads.
    pub fn full_scale(channels: usize) -> Self {
        Self {
            spatial_window: 7,
            bilateral_window: 84,
            suppression: DEFAULT_SUPPRESSION,
            num_heads: 8,
            head_dim: channels / 8,
            channels,
        }
    }

    /// Small-grid setting: `W_d = 2` with `W_b` scaled so the admitted
    /// fraction of the window matches the full-scale 84-of-225 ratio.
    pub fn toy(channels: usize, num_heads: usize) -> Self {
        let spatial_window = 2;
        Self {
            spatial_window,
            bilateral_window: scaled_bilateral_window(spatial_window),
            suppression: DEFAULT_SUPPRESSION,
            num_heads,
            head_dim: channels / num_heads.max(1),
            channels,
        }
    }

    pub fn window_side(&self) -> usize {
        2 * self.spatial_window + 1
    }

    /// Number of positions in an unclipped spatial window.
    pub fn window_area(&self) -> usize {
        self.window_side() * self.window_side()
    }

    /// The `W_b` at which the rank test can never reject a key.
    pub fn max_bilateral_window(&self) -> usize {
        self.window_area() - 1
    }

    /// Same configuration with `W_b` maximal: the mask degenerates to the
    /// fixed spatial window.
    pub fn spatial_local(&self) -> Self {
        Self {
            bilateral_window: self.max_bilateral_window(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(CoreError::Config("num_heads and head_dim must be positive".into()));
        }
        if self.channels != self.num_heads * self.head_dim {
            return Err(CoreError::Config(format!(
                "channels {} != num_heads {} × head_dim {}",
                self.channels, self.num_heads, self.head_dim
            )));
        }
        if self.bilateral_window > self.max_bilateral_window() {
            return Err(CoreError::Config(format!(
                "bilateral window {} exceeds {} for spatial window {}",
                self.bilateral_window,
                self.max_bilateral_window(),
                self.spatial_window
            )));
        }
        if !(self.suppression > 0.0 && self.suppression.is_finite()) {
            return Err(CoreError::Config(format!("suppression {} must be positive", self.suppression)));
        }
        Ok(())
    }
}

/// `floor(84/225 · (2·W_d+1)²)`.
pub fn scaled_bilateral_window(spatial_window: usize) -> usize {
    let side = 2 * spatial_window + 1;
    84 * side * side / 225
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_window_is_scaled_from_full_scale() {
        assert_eq!(scaled_bilateral_window(7), 84);
        assert_eq!(scaled_bilateral_window(2), 9);
        let cfg = AttentionConfig::toy(64, 4);
        assert_eq!(cfg.bilateral_window, 9);
        assert_eq!(cfg.head_dim, 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn spatial_local_only_changes_bilateral_window() {
        let cfg = AttentionConfig::toy(64, 4);
        let local = cfg.spatial_local();
        assert_eq!(local.bilateral_window, 24);
        assert_eq!(AttentionConfig { bilateral_window: cfg.bilateral_window, ..local }, cfg);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = AttentionConfig::toy(64, 4);
        cfg.head_dim = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = AttentionConfig::toy(64, 4);
        cfg.bilateral_window = 25;
        assert!(cfg.validate().is_err());
        let mut cfg = AttentionConfig::toy(64, 4);
        cfg.suppression = 0.0;
        assert!(cfg.validate().is_err());
        AttentionConfig::full_scale(256).validate().unwrap();
    }
}
