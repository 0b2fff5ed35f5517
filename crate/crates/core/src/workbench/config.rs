//! Flat TOML run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CapiError, Result};
use crate::masking::{MaskSpec, MaskStrategy};
use crate::network::NetworkConfig;
use crate::schedule::Schedule;
use crate::trainer::{SinkhornVariant, TrainConfig};

/// Every setting of a run as one flat table. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    /// Checkpoint period in steps; 0 saves only the final state.
    pub checkpoint_every: u64,
    /// Images in a synthetic dataset when none is given on the command line.
    pub synthetic_count: usize,

    pub patch_size: usize,
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub pred_depth: usize,
    pub pred_dim: usize,
    pub pred_heads: usize,
    pub registers: usize,
    pub mlp_ratio: f64,
    pub stochastic_depth: f64,
    pub rope_freq_min: f64,
    pub rope_freq_max: f64,
    pub norm_eps: f64,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub clustering_lr_ratio: f64,
    pub warmup_length: f64,
    pub cosine_truncation: f64,
    pub weight_decay: f64,
    pub adamw_beta1: f64,
    pub adamw_beta2: f64,
    pub num_prototypes: usize,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub num_sk_iter: usize,
    pub sinkhorn: SinkhornVariant,
    pub patch_embed_lr_ratio: f64,
    pub norm_wd_ratio: f64,
    pub image_size: usize,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub hflip: bool,
    pub pred_per_image: usize,
    pub masking_type: MaskStrategy,
    pub masking_ratio: f64,
    pub mi_window: usize,

    pub knn_ks: Vec<usize>,
    pub probe_holdout: f64,
    pub attentive_epochs: usize,
    pub attentive_head_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(
            &NetworkConfig::toy(),
            &TrainConfig::toy(),
            &Schedule::new(2000, 1e-3),
            0,
        )
    }
}

impl RunConfig {
    pub fn from_parts(
        net: &NetworkConfig,
        train: &TrainConfig,
        schedule: &Schedule,
        seed: u64,
    ) -> Self {
        Self {
            seed,
            steps: schedule.total_steps,
            checkpoint_every: 0,
            synthetic_count: 8192,
            patch_size: net.patch_size,
            enc_depth: net.enc_depth,
            enc_dim: net.enc_dim,
            enc_heads: net.enc_heads,
            pred_depth: net.pred_depth,
            pred_dim: net.pred_dim,
            pred_heads: net.pred_heads,
            registers: net.n_reg,
            mlp_ratio: net.mlp_ratio,
            stochastic_depth: net.stochastic_depth,
            rope_freq_min: net.rope_freq_min,
            rope_freq_max: net.rope_freq_max,
            norm_eps: net.norm_eps,
            batch_size: train.batch_size,
            learning_rate: train.lr,
            clustering_lr_ratio: train.clustering_lr_ratio,
            warmup_length: schedule.warmup_fraction,
            cosine_truncation: schedule.cosine_truncation,
            weight_decay: train.weight_decay,
            adamw_beta1: train.adam_betas.0,
            adamw_beta2: train.adam_betas.1,
            num_prototypes: train.prototypes,
            student_temperature: train.tau_student,
            teacher_temperature: train.tau_teacher,
            num_sk_iter: train.sk_iters,
            sinkhorn: train.sinkhorn,
            patch_embed_lr_ratio: train.patch_embed_lr_ratio,
            norm_wd_ratio: train.norm_wd_ratio,
            image_size: train.image_size,
            crop_scale_min: train.crop_scale.0,
            crop_scale_max: train.crop_scale.1,
            hflip: train.hflip,
            pred_per_image: train.n_pred,
            masking_type: train.mask.strategy,
            masking_ratio: train.mask.ratio,
            mi_window: train.mi_window,
            knn_ks: vec![1, 3, 10, 30],
            probe_holdout: 0.1,
            attentive_epochs: 10,
            attentive_head_width: 64,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            patch_size: self.patch_size,
            enc_depth: self.enc_depth,
            enc_dim: self.enc_dim,
            enc_heads: self.enc_heads,
            pred_depth: self.pred_depth,
            pred_dim: self.pred_dim,
            pred_heads: self.pred_heads,
            n_reg: self.registers,
            mlp_ratio: self.mlp_ratio,
            stochastic_depth: self.stochastic_depth,
            rope_freq_min: self.rope_freq_min,
            rope_freq_max: self.rope_freq_max,
            norm_eps: self.norm_eps,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            adam_betas: (self.adamw_beta1, self.adamw_beta2),
            clustering_lr_ratio: self.clustering_lr_ratio,
            patch_embed_lr_ratio: self.patch_embed_lr_ratio,
            norm_wd_ratio: self.norm_wd_ratio,
            mask: MaskSpec {
                strategy: self.masking_type,
                ratio: self.masking_ratio,
            },
            n_pred: self.pred_per_image,
            image_size: self.image_size,
            crop_scale: (self.crop_scale_min, self.crop_scale_max),
            hflip: self.hflip,
            prototypes: self.num_prototypes,
            tau_student: self.student_temperature,
            tau_teacher: self.teacher_temperature,
            sk_iters: self.num_sk_iter,
            sinkhorn: self.sinkhorn,
            mi_window: self.mi_window,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_fraction: self.warmup_length,
            cosine_truncation: self.cosine_truncation,
            ..Schedule::new(self.steps, self.learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate(&self.network())?;
        self.schedule().validate()?;
        if !(0.0..1.0).contains(&self.probe_holdout) || self.knn_ks.contains(&0) {
            return Err(CapiError::Config(
                "probe_holdout must be in [0, 1) and every k positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CapiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CapiError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
