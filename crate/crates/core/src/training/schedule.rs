//! Linear warmup followed by step decay.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub max_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 2e-4,
            warmup_epochs: 3,
            decay_factor: 0.3,
            decay_interval: 5,
            max_epochs: 40,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite())
            || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
            || self.decay_interval == 0
            || self.max_epochs == 0
        {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.max_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.max_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr / self.warmup_epochs as f64 * (epoch + 1) as f64);
        }
        let drops = (epoch - self.warmup_epochs) / self.decay_interval;
        Ok(self.base_lr * self.decay_factor.powi(drops as i32))
    }
}
