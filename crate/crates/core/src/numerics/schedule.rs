use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl LrSchedule {
    pub fn new(
        warmup_steps: usize,
        total_steps: usize,
        lr_max: f64,
        lr_min: f64,
    ) -> Result<Self, NumericsError> {
        let s = Self {
            warmup_steps,
            total_steps,
            lr_max,
            lr_min,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(NumericsError::InvalidSchedule(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(NumericsError::InvalidSchedule(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, NumericsError> {
        if step > self.total_steps {
            return Err(NumericsError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
