//! Training and checkpoint loading shared by the commands.

use std::path::Path;

use segmoe_core::backbone::{ModelConfig, SegMoeModel};
use segmoe_core::data::make_windows;
use segmoe_core::trainer::{fit, Checkpoint, FitOutcome};
use segmoe_core::{Error, Result};

use crate::config::{Prepared, RunConfig};

/// Trains a fresh model (weights seeded by `train.seed`) on the training
/// split, validating on the validation split at the evaluation stride.
pub fn train_run(cfg: &RunConfig, prepared: &Prepared) -> Result<(SegMoeModel, FitOutcome)> {
    cfg.validate()?;
    let (l, h) = (cfg.model.lookback, cfg.model.h_out);
    let train = make_windows(&prepared.data, prepared.split.train.clone(), l, h, cfg.data.train_stride)?;
    let val = make_windows(&prepared.data, prepared.split.val.clone(), l, h, cfg.eval_stride())?;
    log::info!("{} training and {} validation windows", train.len(), val.len());
    let mut model = SegMoeModel::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = fit(&mut model, &train, &val, &cfg.train)?;
    Ok((model, outcome))
}

/// Model configuration recorded in a checkpoint's config echo.
pub fn checkpoint_model_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
    let echo: serde_json::Value =
        serde_json::from_str(&ckpt.config).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let model = echo
        .get("model")
        .ok_or_else(|| Error::Format("config echo lacks `model`".into()))?;
    serde_json::from_value(model.clone()).map_err(|e| Error::Format(format!("model config: {e}")))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SegMoeModel> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = SegMoeModel::new(checkpoint_model_config(&ckpt)?, 0)?;
    model.store_mut().load_values(&ckpt.params)?;
    Ok(model)
}
