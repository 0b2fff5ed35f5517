use serde::{Deserialize, Serialize};

use crate::error::{CapiError, Result};

/// Shapes and constants of the encoder and the predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub patch_size: usize,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub pred_depth: usize,
    pub pred_dim: usize,
    pub pred_heads: usize,
    pub n_reg: usize,
    pub mlp_ratio: f64,
    pub stochastic_depth: f64,
    pub rope_freq_min: f64,
    pub rope_freq_max: f64,
    pub norm_eps: f64,
}

impl NetworkConfig {
    /// Encoder-shaped config with the predictor aligned to it (half depth,
    /// same width and heads).
    pub fn aligned(
        patch_size: usize,
        enc_depth: usize,
        enc_dim: usize,
        enc_heads: usize,
        n_reg: usize,
    ) -> Self {
        Self {
            patch_size,
            enc_depth,
            enc_dim,
            enc_heads,
            pred_depth: (enc_depth / 2).max(1),
            pred_dim: enc_dim,
            pred_heads: enc_heads,
            n_reg,
            mlp_ratio: 4.0,
            stochastic_depth: 0.2,
            rope_freq_min: 7e-4,
            rope_freq_max: 7.0,
            norm_eps: 1e-5,
        }
    }

    /// ViT-L/16 with 16 registers.
    pub fn vit_large() -> Self {
        Self::aligned(16, 24, 1024, 16, 16)
    }

    /// Depth 4, width 64, 4 heads, patch 8; used for the synthetic toy task.
    pub fn toy() -> Self {
        Self {
            stochastic_depth: 0.1,
            ..Self::aligned(8, 4, 64, 4, 4)
        }
    }

    pub fn enc_head_dim(&self) -> usize {
        self.enc_dim / self.enc_heads
    }

    pub fn pred_head_dim(&self) -> usize {
        self.pred_dim / self.pred_heads
    }

    pub fn enc_hidden(&self) -> usize {
        (self.enc_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn pred_hidden(&self) -> usize {
        (self.pred_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CapiError::Config(m));
        if self.patch_size == 0 || self.enc_dim == 0 || self.pred_dim == 0 || self.enc_depth == 0 {
            return err("patch_size, enc_dim, pred_dim and enc_depth must be positive".into());
        }
        if self.enc_heads == 0 || !self.enc_dim.is_multiple_of(self.enc_heads) {
            return err(format!(
                "enc_dim {} not divisible by enc_heads {}",
                self.enc_dim, self.enc_heads
            ));
        }
        if self.pred_heads == 0 || !self.pred_dim.is_multiple_of(self.pred_heads) {
            return err(format!(
                "pred_dim {} not divisible by pred_heads {}",
                self.pred_dim, self.pred_heads
            ));
        }
        for (name, hd) in [
            ("encoder", self.enc_head_dim()),
            ("predictor", self.pred_head_dim()),
        ] {
            if hd % 4 != 0 {
                return err(format!(
                    "{name} head dim {hd} must be divisible by 4 for axial rope"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.stochastic_depth) {
            return err(format!(
                "stochastic_depth {} outside [0, 1)",
                self.stochastic_depth
            ));
        }
        if !(self.rope_freq_min > 0.0 && self.rope_freq_max >= self.rope_freq_min) {
            return err("rope frequencies must satisfy 0 < min <= max".into());
        }
        if !(self.norm_eps > 0.0) || !(self.mlp_ratio > 0.0) {
            return err("norm_eps and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}
