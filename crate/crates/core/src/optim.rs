//! AdamW with per-parameter learning-rate and weight-decay multipliers.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::error::{CapiError, Result};
use crate::network::params::{is_norm, is_patch_embed};
use crate::network::ParamSet;

/// Multipliers applied to the base learning rate and weight decay of one
/// parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupScale {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Patch embedding trains at a reduced rate, norm gains are barely decayed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneGroups {
    pub patch_embed_lr_ratio: f64,
    pub norm_wd_ratio: f64,
}

impl BackboneGroups {
    pub fn scale_for(&self, name: &str) -> GroupScale {
        GroupScale {
            lr: if is_patch_embed(name) {
                self.patch_embed_lr_ratio
            } else {
                1.0
            },
            weight_decay: if is_norm(name) {
                self.norm_wd_ratio
            } else {
                1.0
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once per optimizer step before
    /// [`AdamW::update`].
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Updates one tensor in place.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        lr: f64,
        group: GroupScale,
    ) -> Result<()> {
        if self.steps == 0 {
            return Err(CapiError::Config("AdamW::update before begin_step".into()));
        }
        if param.dim() != grad.dim() {
            return Err(CapiError::InvalidShape(format!(
                "gradient shape mismatch for '{name}'"
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let lr_g = lr * group.lr;
        let decay = 1.0 - lr_g * self.weight_decay * group.weight_decay;
        let m = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                first: Array2::zeros(grad.raw_dim()),
                second: Array2::zeros(grad.raw_dim()),
            });
        Zip::from(param)
            .and(&mut m.first)
            .and(&mut m.second)
            .and(grad)
            .for_each(|pv, mv, vv, &gv| {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr_g * mhat / (vhat.sqrt() + eps);
            });
        Ok(())
    }

    /// One step over every parameter of `params` that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        scale: impl Fn(&str) -> GroupScale,
    ) -> Result<()> {
        self.begin_step();
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                CapiError::Config(format!("gradient for unknown parameter '{name}'"))
            })?;
            self.update(name, p, g, lr, scale(name))?;
        }
        Ok(())
    }
}
