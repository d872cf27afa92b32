use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::window::STD_FLOOR;
use super::Dataset;
use crate::error::{Error, Result};

/// Train / validation / test ranges, contiguous and in time order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSizes {
    Explicit([usize; 3]),
    Fractions([f64; 3]),
}

/// Lays the three splits end to end starting at t = 0.
pub fn chronological_split(len: usize, sizes: &SplitSizes) -> Result<SplitSpec> {
    let [train, val, test] = match *sizes {
        SplitSizes::Explicit(s) => s,
        SplitSizes::Fractions(f) => {
            if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::config("split", format!("fractions {f:?} must lie in [0, 1]")));
            }
            let total: f64 = f.iter().sum();
            if total > 1.0 + 1e-9 {
                return Err(Error::config("split", format!("fractions sum to {total} > 1")));
            }
            let train = (len as f64 * f[0]).round() as usize;
            let val = (len as f64 * f[1]).round() as usize;
            let test = ((len as f64 * f[2]).round() as usize).min(len.saturating_sub(train + val));
            [train, val, test]
        }
    };
    if train + val + test > len {
        return Err(Error::config(
            "split",
            format!("sizes ({train}, {val}, {test}) exceed series length {len}"),
        ));
    }
    Ok(SplitSpec {
        train: 0..train,
        val: train..train + val,
        test: train + val..train + val + test,
    })
}

/// Per-variable standardization fitted on one range (the training split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(ds: &Dataset, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > ds.len() {
            return Err(Error::Invalid(format!("cannot fit scaler on {range:?}")));
        }
        let n = range.len() as f64;
        let mut mean = vec![0.0; ds.channels()];
        let mut std = vec![0.0; ds.channels()];
        for c in 0..ds.channels() {
            let m = range.clone().map(|t| ds.value(t, c)).sum::<f64>() / n;
            let var = range.clone().map(|t| (ds.value(t, c) - m).powi(2)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = if var.sqrt() < STD_FLOOR { 1.0 } else { var.sqrt() };
        }
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        ds.map_channels(|c, v| (v - self.mean[c]) / self.std[c])
    }

    pub fn inverse(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }
}
