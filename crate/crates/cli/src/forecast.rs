//! One-for-all inference: a model with a fixed output length reaches any
//! horizon by feeding its own predictions back in.

use segmoe_core::backbone::SegMoeModel;
use segmoe_core::data::{normalize_window, Dataset};
use segmoe_core::tensor::Tensor;
use segmoe_core::{Error, Result};

/// Anything that maps normalized windows `[Bt, L]` to `[Bt, H_o]`.
pub trait StepModel {
    fn lookback(&self) -> usize;
    fn h_out(&self) -> usize;
    fn predict(&self, inputs: &Tensor) -> Result<Tensor>;
}

impl StepModel for SegMoeModel {
    fn lookback(&self) -> usize {
        self.config().lookback
    }

    fn h_out(&self) -> usize {
        self.config().h_out
    }

    fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        SegMoeModel::predict(self, inputs)
    }
}

/// Number of model calls needed to reach `horizon`.
pub fn forecast_steps(horizon: usize, h_out: usize) -> usize {
    horizon.div_ceil(h_out)
}

/// Forecasts `horizon` raw-scale values after each context (each exactly `L`
/// long). Every step re-normalizes the most recent `L` values, predicts
/// `H_o` normalized values and denormalizes them with that step's stats.
pub fn autoregressive_forecast_batch(
    model: &impl StepModel,
    contexts: &[&[f64]],
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    let (l, h_out) = (model.lookback(), model.h_out());
    if horizon == 0 {
        return Err(Error::config("horizon", "must be >= 1"));
    }
    if let Some(c) = contexts.iter().find(|c| c.len() != l) {
        return Err(Error::Invalid(format!(
            "context has {} values, the model looks back {l}",
            c.len()
        )));
    }
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let mut series: Vec<Vec<f64>> = contexts.iter().map(|c| c.to_vec()).collect();
    for _ in 0..forecast_steps(horizon, h_out) {
        let mut inputs = Vec::with_capacity(series.len() * l);
        let mut stats = Vec::with_capacity(series.len());
        for s in &series {
            let (z, st) = normalize_window(&s[s.len() - l..]);
            inputs.extend(z);
            stats.push(st);
        }
        let out = model.predict(&Tensor::new(vec![series.len(), l], inputs)?)?;
        if out.shape() != [series.len(), h_out] {
            return Err(Error::Shape {
                op: "autoregressive_forecast",
                lhs: out.shape().to_vec(),
                rhs: vec![series.len(), h_out],
            });
        }
        for (i, (s, st)) in series.iter_mut().zip(&stats).enumerate() {
            s.extend(out.row(i).iter().map(|&v| st.denormalize(v)));
        }
    }
    Ok(series.into_iter().map(|s| s[l..l + horizon].to_vec()).collect())
}

pub fn autoregressive_forecast(model: &impl StepModel, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
    Ok(autoregressive_forecast_batch(model, &[context], horizon)?.remove(0))
}

/// A forecast request: predict `channel` from time `origin` on, given the
/// `L` values before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Origin {
    pub channel: usize,
    pub origin: usize,
}

/// Produces multi-step forecasts for a batch of origins in one dataset.
pub trait Forecaster {
    fn name(&self) -> &str;
    fn lookback(&self) -> usize;
    fn forecast(&self, data: &Dataset, origins: &[Origin], horizon: usize) -> Result<Vec<Vec<f64>>>;
}

fn contexts<'d>(data: &'d Dataset, origins: &[Origin], l: usize) -> Result<Vec<Vec<f64>>> {
    origins
        .iter()
        .map(|o| {
            if o.origin < l || o.origin > data.len() || o.channel >= data.channels() {
                Err(Error::Invalid(format!("origin {o:?} has no full look-back in the series")))
            } else {
                Ok(data.slice(o.channel, o.origin - l, o.origin))
            }
        })
        .collect()
}

/// The trained model, in batches of `batch_size` origins.
pub struct ModelForecaster<'m, M> {
    pub model: &'m M,
    pub batch_size: usize,
}

impl<M: StepModel> Forecaster for ModelForecaster<'_, M> {
    fn name(&self) -> &str {
        "model"
    }

    fn lookback(&self) -> usize {
        self.model.lookback()
    }

    fn forecast(&self, data: &Dataset, origins: &[Origin], horizon: usize) -> Result<Vec<Vec<f64>>> {
        let ctx = contexts(data, origins, self.lookback())?;
        let mut out = Vec::with_capacity(origins.len());
        for chunk in ctx.chunks(self.batch_size.max(1)) {
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            out.extend(autoregressive_forecast_batch(self.model, &refs, horizon)?);
        }
        Ok(out)
    }
}

/// Repeats the last observed value.
pub struct Persistence {
    pub lookback: usize,
}

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn lookback(&self) -> usize {
        self.lookback
    }

    fn forecast(&self, data: &Dataset, origins: &[Origin], horizon: usize) -> Result<Vec<Vec<f64>>> {
        Ok(contexts(data, origins, self.lookback)?
            .into_iter()
            .map(|c| vec![c[c.len() - 1]; horizon])
            .collect())
    }
}

/// Reads the future straight from the dataset.
pub struct PerfectOracle {
    pub lookback: usize,
}

impl Forecaster for PerfectOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn lookback(&self) -> usize {
        self.lookback
    }

    fn forecast(&self, data: &Dataset, origins: &[Origin], horizon: usize) -> Result<Vec<Vec<f64>>> {
        origins
            .iter()
            .map(|o| {
                if o.origin + horizon > data.len() {
                    Err(Error::Invalid(format!("origin {o:?} + {horizon} runs past the series")))
                } else {
                    Ok(data.slice(o.channel, o.origin, o.origin + horizon))
                }
            })
            .collect()
    }
}
