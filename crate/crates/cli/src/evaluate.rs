//! Multi-horizon metric tables and forecast export.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use segmoe_core::data::{make_windows, Dataset};
use segmoe_core::objective::mse_mae;
use segmoe_core::{Error, Result};

use crate::forecast::{Forecaster, Origin};

/// Origins handed to a forecaster at once.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// `None` for the average row.
    pub horizon: Option<usize>,
    pub mse: f64,
    pub mae: f64,
    /// Forecast windows (channel × origin) behind the numbers; 0 when skipped.
    pub windows: usize,
}

impl MetricRow {
    pub fn label(&self) -> String {
        self.horizon.map_or_else(|| "avg".to_string(), |h| h.to_string())
    }

    pub fn skipped(&self) -> bool {
        self.windows == 0
    }
}

/// One row per horizon plus a final average row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub model: String,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn average(&self) -> &MetricRow {
        self.rows.last().expect("table always has an average row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,mse,mae,windows\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.label(), r.mse, r.mae, r.windows);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>12} {:>12} {:>8}\n", self.model, "MSE", "MAE", "windows");
        for r in &self.rows {
            if r.skipped() && r.horizon.is_some() {
                let _ = writeln!(s, "{:<8} {:>12} {:>12} {:>8}", r.label(), "skipped", "skipped", 0);
            } else {
                let _ = writeln!(s, "{:<8} {:>12.6} {:>12.6} {:>8}", r.label(), r.mse, r.mae, r.windows);
            }
        }
        s
    }
}

/// Forecasts every `(channel, origin)` window of `range` whose look-back and
/// horizon both fit inside it, stepping origins by `stride`. Metrics pool all
/// windows and channels of a horizon; the average row is the mean over the
/// horizons that could be evaluated.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    data: &Dataset,
    range: Range<usize>,
    horizons: &[usize],
    stride: usize,
) -> Result<MetricTable> {
    crate::config::validate_horizons(horizons)?;
    let l = forecaster.lookback();
    let mut rows = Vec::with_capacity(horizons.len() + 1);
    for &h in horizons {
        let stream = make_windows(data, range.clone(), l, h, stride)?;
        if stream.is_empty() {
            log::warn!(
                "horizon {h} skipped: the evaluation range ({} steps) is shorter than look-back + horizon = {}",
                range.len(),
                l + h
            );
            rows.push(MetricRow {
                horizon: Some(h),
                mse: f64::NAN,
                mae: f64::NAN,
                windows: 0,
            });
            continue;
        }
        let origins: Vec<Origin> = stream
            .positions()
            .iter()
            .map(|p| Origin {
                channel: p.channel,
                origin: p.start + l,
            })
            .collect();
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for chunk in origins.chunks(CHUNK) {
            let out = forecaster.forecast(data, chunk, h)?;
            for (o, y) in chunk.iter().zip(out) {
                if y.len() != h {
                    return Err(Error::Invalid(format!("{} returned {} values for horizon {h}", forecaster.name(), y.len())));
                }
                truth.extend(data.slice(o.channel, o.origin, o.origin + h));
                pred.extend(y);
            }
        }
        let (mse, mae) = mse_mae(&pred, &truth)?;
        rows.push(MetricRow {
            horizon: Some(h),
            mse,
            mae,
            windows: origins.len(),
        });
    }
    let done: Vec<&MetricRow> = rows.iter().filter(|r| !r.skipped()).collect();
    let avg = if done.is_empty() {
        MetricRow {
            horizon: None,
            mse: f64::NAN,
            mae: f64::NAN,
            windows: 0,
        }
    } else {
        let n = done.len() as f64;
        MetricRow {
            horizon: None,
            mse: done.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: done.iter().map(|r| r.mae).sum::<f64>() / n,
            windows: done.iter().map(|r| r.windows).sum(),
        }
    };
    rows.push(avg);
    Ok(MetricTable {
        model: forecaster.name().to_string(),
        rows,
    })
}

/// Writes the look-back tail and an `H`-step forecast of one window as CSV:
/// `t,context,truth,prediction`, with `NA` where a column does not apply.
/// `index` counts the windows of `range` at `stride`, channel-minor.
pub fn export_forecast(
    forecaster: &dyn Forecaster,
    data: &Dataset,
    range: Range<usize>,
    stride: usize,
    index: usize,
    horizon: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let l = forecaster.lookback();
    let stream = make_windows(data, range, l, horizon, stride)?;
    let pos = *stream.positions().get(index).ok_or_else(|| {
        Error::config(
            "window",
            format!("index {index} out of range ({} windows available)", stream.len()),
        )
    })?;
    let origin = Origin {
        channel: pos.channel,
        origin: pos.start + l,
    };
    let pred = forecaster.forecast(data, &[origin], horizon)?.remove(0);
    let mut s = String::from("t,context,truth,prediction\n");
    for t in pos.start..origin.origin {
        let _ = writeln!(s, "{t},{},NA,NA", data.value(t, pos.channel));
    }
    for (i, p) in pred.iter().enumerate() {
        let t = origin.origin + i;
        let _ = writeln!(s, "{t},NA,{},{p}", data.value(t, pos.channel));
    }
    std::fs::write(path, s)?;
    Ok(())
}
