use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-optimizer-step learning rate: linear warmup, then cosine decay to
/// `min_lr_ratio · peak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub min: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    /// `W = round(warmup_ratio · T)`, at least one step whenever the ratio is
    /// positive.
    pub fn new(peak: f64, min_lr_ratio: f64, warmup_ratio: f64, total_steps: u64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::Config(format!("peak learning rate must be positive, got {peak}")));
        }
        if !(0.0..=1.0).contains(&min_lr_ratio) {
            return Err(Error::Config(format!("min_lr_ratio {min_lr_ratio} outside [0, 1]")));
        }
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {warmup_ratio} outside [0, 1)")));
        }
        let mut warmup_steps = (warmup_ratio * total_steps as f64).round() as u64;
        if warmup_ratio > 0.0 {
            warmup_steps = warmup_steps.max(1);
        }
        if total_steps <= warmup_steps {
            return Err(Error::Config(format!(
                "schedule needs more total steps ({total_steps}) than warmup steps ({warmup_steps})"
            )));
        }
        Ok(Self {
            peak,
            min: min_lr_ratio * peak,
            total_steps,
            warmup_steps,
        })
    }

    /// Learning rate at step `t ∈ [0, T]`. Warmup starts at `peak/W`, not 0.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        let (w, total) = (self.warmup_steps, self.total_steps);
        if t > total {
            return Err(Error::Config(format!("step {t} beyond schedule end {total}")));
        }
        if t < w {
            return Ok(self.peak * (t + 1) as f64 / w as f64);
        }
        if t == total {
            return Ok(self.min);
        }
        let progress = (t - w) as f64 / (total - w) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min + (self.peak - self.min) * cos)
    }
}
