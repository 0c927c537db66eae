use std::f64::consts::PI;

use crate::error::{cfg_err, Result};

/// Cosine annealing with hard restarts, indexed by (fractional) epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub restart_period: usize,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-3,
            restart_period: 10,
            min_lr: 0.0,
            total_epochs: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restart_period == 0 {
            return Err(cfg_err!("restart period must be at least one epoch"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(cfg_err!("need 0 <= min_lr <= base_lr, got {} and {}", self.min_lr, self.base_lr));
        }
        if self.total_epochs == 0 {
            return Err(cfg_err!("total epochs must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at `frac` of the way through `epoch`.
pub fn lr_at(epoch: usize, frac: f64, cfg: &ScheduleConfig) -> f64 {
    let period = cfg.restart_period as f64;
    let t = ((epoch % cfg.restart_period) as f64 + frac) / period;
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * t).cos())
}
