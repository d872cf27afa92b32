use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate at optimizer step `step` of `total`: linear warmup from 0
/// to the peak over the first `warmup_frac · total` steps, then cosine decay
/// to the minimum at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    let warmup = (cfg.warmup_frac * total as f64).round() as usize;
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if total == warmup {
        return cfg.peak_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Patience-based stopping on the validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_epochs: usize,
    best: f64,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_epochs: usize) -> Self {
        EarlyStopping {
            patience,
            min_epochs,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records the validation loss of 1-based `epoch`.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_epochs >= self.patience && epoch >= self.min_epochs,
        }
    }
}
