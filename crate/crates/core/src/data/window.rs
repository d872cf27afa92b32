use std::ops::Range;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Windows whose population std falls below this are divided by 1 instead.
pub const STD_FLOOR: f64 = 1e-8;

/// Instance-normalization statistics of one look-back window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Z-scores a window with its own mean and population std.
pub fn normalize_window(window: &[f64]) -> (Vec<f64>, NormStats) {
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() < STD_FLOOR { 1.0 } else { var.sqrt() };
    let stats = NormStats { mean, std };
    (window.iter().map(|&v| stats.normalize(v)).collect(), stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowIndex {
    pub channel: usize,
    /// First time index of the look-back.
    pub start: usize,
}

/// A batch of channel-independent samples, normalized per window.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `[n, L]`
    pub inputs: Tensor,
    /// `[n, H_o]`, normalized with the look-back statistics.
    pub targets: Tensor,
    pub stats: Vec<NormStats>,
    pub channels: Vec<usize>,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

/// Every `(channel, start)` pair in a range with `start + L + H_o <= end`,
/// stepping `start` by `stride`. Samples are ordered start-major.
#[derive(Clone, Debug)]
pub struct WindowStream<'a> {
    dataset: &'a Dataset,
    lookback: usize,
    horizon: usize,
    positions: Vec<WindowIndex>,
    short: bool,
}

pub fn make_windows<'a>(
    dataset: &'a Dataset,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowStream<'a>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config(
            "windows",
            format!("lookback ({lookback}), horizon ({horizon}) and stride ({stride}) must be >= 1"),
        ));
    }
    if range.end > dataset.len() {
        return Err(Error::Invalid(format!(
            "range {range:?} exceeds dataset length {}",
            dataset.len()
        )));
    }
    let span = lookback + horizon;
    let mut positions = Vec::new();
    let short = range.len() < span;
    if !short {
        let mut start = range.start;
        while start + span <= range.end {
            for channel in 0..dataset.channels() {
                positions.push(WindowIndex { channel, start });
            }
            start += stride;
        }
    } else {
        log::warn!(
            "range {range:?} is shorter than lookback + horizon = {span}; no windows produced"
        );
    }
    Ok(WindowStream {
        dataset,
        lookback,
        horizon,
        positions,
        short,
    })
}

impl<'a> WindowStream<'a> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// True when the range could not hold a single window.
    pub fn is_short(&self) -> bool {
        self.short
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn positions(&self) -> &[WindowIndex] {
        &self.positions
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// Materializes the samples at the given positions (indices into
    /// [`WindowStream::positions`]).
    pub fn batch(&self, which: &[usize]) -> Result<WindowBatch> {
        let (l, h) = (self.lookback, self.horizon);
        let n = which.len();
        let mut inputs = Vec::with_capacity(n * l);
        let mut targets = Vec::with_capacity(n * h);
        let mut stats = Vec::with_capacity(n);
        let mut channels = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        for &i in which {
            let p = self.positions[i];
            let look = self.dataset.slice(p.channel, p.start, p.start + l);
            let (norm, st) = normalize_window(&look);
            inputs.extend(norm);
            targets.extend((p.start + l..p.start + l + h).map(|t| st.normalize(self.dataset.value(t, p.channel))));
            stats.push(st);
            channels.push(p.channel);
            starts.push(p.start);
        }
        Ok(WindowBatch {
            inputs: Tensor::new(vec![n, l], inputs)?,
            targets: Tensor::new(vec![n, h], targets)?,
            stats,
            channels,
            starts,
        })
    }

    /// Consecutive batches over `order` (defaults to natural order).
    pub fn batches<'s>(
        &'s self,
        batch_size: usize,
        order: Option<&'s [usize]>,
    ) -> impl Iterator<Item = Result<WindowBatch>> + 's {
        let natural: Vec<usize>;
        let order: std::borrow::Cow<'s, [usize]> = match order {
            Some(o) => std::borrow::Cow::Borrowed(o),
            None => {
                natural = (0..self.len()).collect();
                std::borrow::Cow::Owned(natural)
            }
        };
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Non-overlapping patches of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    /// `[M, P]`; the tail of the last patch is zero-padded.
    pub data: Tensor,
    /// One flag per patch; a patch is valid when it holds any real step.
    pub mask: Vec<bool>,
    /// Number of real steps in the last patch.
    pub tail_valid: usize,
}

impl Patches {
    /// Concatenates the real (unpadded) steps back into a window.
    pub fn flatten_valid(&self) -> Vec<f64> {
        let m = self.mask.len();
        let p = self.data.shape()[1];
        let mut out = self.data.data()[..(m - 1) * p].to_vec();
        out.extend_from_slice(&self.data.data()[(m - 1) * p..(m - 1) * p + self.tail_valid]);
        out
    }
}

/// Splits a window of length `L` into `M = ceil(L / P)` patches.
pub fn patchify(window: &[f64], patch_len: usize) -> Result<Patches> {
    if patch_len == 0 || window.is_empty() {
        return Err(Error::config("patch_len", "patch length and window must be non-empty"));
    }
    let m = window.len().div_ceil(patch_len);
    let mut data = vec![0.0; m * patch_len];
    data[..window.len()].copy_from_slice(window);
    let tail_valid = window.len() - (m - 1) * patch_len;
    Ok(Patches {
        data: Tensor::new(vec![m, patch_len], data)?,
        mask: vec![true; m],
        tail_valid,
    })
}
