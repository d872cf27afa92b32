//! Optimization loop: AdamW, warmup + cosine schedule, early stopping,
//! checkpoints and per-epoch history.

mod adamw;
mod checkpoint;
mod schedule;

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardCtx, ForwardOptions, SegMoeModel};
use crate::data::WindowStream;
use crate::error::{Error, Result};
use crate::objective::{huber, total_loss, DEFAULT_ALPHA, DEFAULT_DELTA};
use crate::segmoe::{RoutingAccumulator, RoutingStats};
use crate::tensor::Graph;

pub use adamw::{clip_global_norm, AdamW, StepOutcome};
pub use checkpoint::Checkpoint;
pub use schedule::{lr_at, EarlyStopping, StopDecision};

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    /// Balance-loss weight.
    pub alpha: f64,
    /// Huber threshold.
    pub delta: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3.2e-4,
            min_lr: 1.2e-6,
            warmup_frac: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            batch_size: 32,
            max_epochs: 30,
            min_epochs: 10,
            patience: 5,
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr", "must be positive"));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::config("min_lr", "must satisfy 0 < min_lr <= peak_lr"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac", "must lie in [0, 1)"));
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be >= 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("delta", "must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean balance loss per layer.
    pub aux: Vec<f64>,
    /// Training-set routing per layer.
    pub routing: Vec<RoutingStats>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_loss,val_loss,lr,aux_0..,entropy_0..`
    pub fn to_csv(&self) -> String {
        let layers = self.epochs.first().map_or(0, |e| e.aux.len());
        let mut s = String::from("epoch,train_loss,val_loss,lr");
        for l in 0..layers {
            let _ = write!(s, ",aux_{l}");
        }
        for l in 0..layers {
            let _ = write!(s, ",entropy_{l}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr);
            for a in &e.aux {
                let _ = write!(s, ",{a}");
            }
            for r in &e.routing {
                let _ = write!(s, ",{}", r.entropy);
            }
            s.push('\n');
        }
        s
    }

    /// `epoch,layer,expert,f,r,entropy`
    pub fn routing_csv(&self) -> String {
        let mut s = String::from("epoch,layer,expert,f,r,entropy\n");
        for e in &self.epochs {
            for (l, st) in e.routing.iter().enumerate() {
                for (i, (f, r)) in st.f.iter().zip(&st.r).enumerate() {
                    let _ = writeln!(s, "{},{l},{i},{f},{r},{}", e.epoch, st.entropy);
                }
            }
        }
        s
    }

    pub fn write(&self, history: impl AsRef<Path>, routing: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(history)?.write_all(self.to_csv().as_bytes())?;
        std::fs::File::create(routing)?.write_all(self.routing_csv().as_bytes())?;
        Ok(())
    }

    /// Per-layer usage entropy of the final epoch.
    pub fn final_entropy(&self) -> Vec<f64> {
        self.epochs.last().map_or_else(Vec::new, |e| e.routing.iter().map(|r| r.entropy).collect())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub history: History,
    pub stopped_early: bool,
}

/// Mean Huber loss over every element of `stream` in evaluation mode.
pub fn evaluate_loss(model: &SegMoeModel, stream: &WindowStream, batch_size: usize, delta: f64) -> Result<f64> {
    if stream.is_empty() {
        return Err(Error::Invalid("evaluation stream is empty".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in stream.batches(batch_size, None) {
        let batch = batch?;
        let mut g = Graph::new();
        let p = model.store().bind(&mut g, false);
        let out = model.forward(&mut g, &p, &batch.inputs, &mut ForwardCtx::eval(), &ForwardOptions::default())?;
        let t = g.constant(batch.targets.clone());
        let l = huber(&mut g, out.pred, t, delta)?;
        let n = batch.targets.numel();
        sum += g.value(l).data()[0] * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

fn config_echo(model: &SegMoeModel, cfg: &TrainConfig) -> String {
    serde_json::json!({ "model": model.config(), "train": cfg }).to_string()
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters.
pub fn fit(model: &mut SegMoeModel, train: &WindowStream, val: &WindowStream, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "training needs non-empty streams (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx = ForwardCtx::train(cfg.seed ^ 0x5eed_d12f);
    let mut opt = AdamW::new(model.store());
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_epochs);
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let echo = config_echo(model, cfg);
    let layers = model.blocks().len();
    let mut step = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc: Vec<RoutingAccumulator> = (0..layers).map(|_| RoutingAccumulator::default()).collect();
        let (mut loss_sum, mut aux_sum, mut finite_batches) = (0.0, vec![0.0; layers], 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk)?;
            let mut g = Graph::new();
            let p = model.store().bind(&mut g, true);
            let out = model.forward(&mut g, &p, &batch.inputs, &mut ctx, &ForwardOptions::default())?;
            let target = g.constant(batch.targets);
            step += 1;
            lr = lr_at(step, total_steps, cfg);
            let (loss, report) = match total_loss(&mut g, out.pred, target, &out.routing, cfg.alpha, cfg.delta) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    log::warn!("epoch {epoch}: non-finite loss ({msg}); batch skipped");
                    continue;
                }
                Err(e) => return Err(e),
            };
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = p
                .vars()
                .iter()
                .zip(model.store().iter())
                .map(|(&v, (_, _, t))| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            opt.step(model.store_mut(), &grads, lr, cfg);
            for (a, r) in acc.iter_mut().zip(&out.routing) {
                a.add(&r.decision);
            }
            loss_sum += report.total;
            for (s, a) in aux_sum.iter_mut().zip(&report.aux) {
                *s += a;
            }
            finite_batches += 1;
        }
        if finite_batches == 0 {
            return Err(Error::NonFinite(format!("every training batch of epoch {epoch} produced a non-finite loss")));
        }
        let val_loss = evaluate_loss(model, val, cfg.batch_size, cfg.delta)?;
        let routing = acc.iter().map(RoutingAccumulator::finish).collect::<Result<Vec<_>>>()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / finite_batches as f64,
            val_loss,
            lr,
            aux: aux_sum.iter().map(|s| s / finite_batches as f64).collect(),
            routing,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6} lr {:.3e}",
            record.train_loss,
            record.val_loss,
            record.lr
        );
        history.epochs.push(record);
        let decision = stopper.update(epoch, val_loss);
        if decision.improved {
            best = Some(Checkpoint::new(model.store(), &opt, epoch, val_loss, echo.clone()));
        }
        if decision.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let checkpoint = best.ok_or_else(|| Error::NonFinite("no finite validation loss was observed".into()))?;
    model.store_mut().load_values(&checkpoint.params)?;
    Ok(FitOutcome {
        checkpoint,
        history,
        stopped_early,
    })
}
