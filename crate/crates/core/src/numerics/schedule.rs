//! Per-epoch schedules: learning rate, EMA momentum and the reconstruction
//! loss weight.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCfg {
    pub target_lr: f64,
    pub warmup_epochs: usize,
    pub decay_gamma: f64,
}

impl Default for ScheduleCfg {
    fn default() -> Self {
        Self {
            target_lr: 1e-3,
            warmup_epochs: 5,
            decay_gamma: 0.99,
        }
    }
}

impl ScheduleCfg {
    pub fn with_target(target_lr: f64) -> Self {
        Self {
            target_lr,
            ..Self::default()
        }
    }

    /// Linear warmup from `target/warmup` reaching `target` at epoch
    /// `warmup - 1`, then exponential decay by `gamma` per epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        let w = self.warmup_epochs.max(1);
        if epoch < w {
            self.target_lr * ((epoch + 1) as f64 / w as f64)
        } else {
            self.target_lr * self.decay_gamma.powi((epoch - w + 1) as i32)
        }
    }
}

/// Linear ramp from 0 at epoch 0 to `target` at `warmup_epochs`, constant after.
pub fn ema_momentum(epoch: usize, target: f64, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs {
        target
    } else {
        target * (epoch as f64 / warmup_epochs as f64)
    }
}

/// Observed-slot loss weight: 1 for the first `flat_epochs`, then linear down
/// to 0 at `total_epochs`.
pub fn alpha_schedule(epoch: usize, total_epochs: usize, flat_epochs: usize) -> f64 {
    if epoch < flat_epochs {
        return 1.0;
    }
    if total_epochs <= flat_epochs {
        return 0.0;
    }
    let span = (total_epochs - flat_epochs) as f64;
    (1.0 - (epoch - flat_epochs) as f64 / span).clamp(0.0, 1.0)
}
