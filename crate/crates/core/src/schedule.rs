use serde::{Deserialize, Serialize};

use crate::error::{CapiError, Result};

/// Linear warmup followed by a cosine decay whose tail is cut off.
///
/// With truncation `c`, training ends when the cosine has covered `1 − c` of
/// its half period, so the final learning rate stays above the floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub cosine_truncation: f64,
    pub peak_lr: f64,
    pub final_lr_floor: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, peak_lr: f64) -> Self {
        Self {
            total_steps,
            warmup_fraction: 0.10,
            cosine_truncation: 0.20,
            peak_lr,
            final_lr_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CapiError::Config(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction outside [0, 1)");
        }
        if !(0.0..1.0).contains(&self.cosine_truncation) {
            return bad("cosine_truncation outside [0, 1)");
        }
        if !(self.peak_lr > 0.0) || self.final_lr_floor < 0.0 || self.final_lr_floor > self.peak_lr
        {
            return bad("need 0 <= final_lr_floor <= peak_lr and peak_lr > 0");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(CapiError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.peak_lr * step as f64 / warm as f64);
        }
        let span = (self.total_steps - warm).max(1) as f64;
        let u = (1.0 - self.cosine_truncation) * (step - warm) as f64 / span;
        Ok(self.final_lr_floor
            + 0.5 * (self.peak_lr - self.final_lr_floor) * (1.0 + (std::f64::consts::PI * u).cos()))
    }
}
