//! Dataset ingestion, chronological splits, windowing and synthetic series.

mod split;
mod synth;
mod window;

use std::path::Path;

pub use split::{chronological_split, Scaler, SplitSizes, SplitSpec};
pub use synth::{synth_series, ChannelSpec, Sinusoid, SynthSpec};
pub use window::{
    make_windows, normalize_window, patchify, NormStats, Patches, WindowBatch, WindowIndex, WindowStream,
    STD_FLOOR,
};

use crate::error::{Error, Result};

/// Multivariate series stored time-major: `values[t * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    len: usize,
    names: Vec<String>,
    pub frequency: String,
}

impl Dataset {
    /// Builds a dataset from time-major rows.
    pub fn from_rows(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(Error::Invalid("dataset needs at least one variable".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Invalid(format!("row {i} has {} values, expected {d}", row.len())));
            }
            values.extend_from_slice(row);
        }
        Ok(Dataset {
            len: rows.len(),
            values,
            names,
            frequency: String::new(),
        })
    }

    /// Builds a dataset from per-channel columns of equal length.
    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() || columns.is_empty() {
            return Err(Error::Invalid("one name per column required".into()));
        }
        let len = columns[0].len();
        if columns.iter().any(|c| c.len() != len) {
            return Err(Error::Invalid("columns differ in length".into()));
        }
        let d = columns.len();
        let mut values = vec![0.0; len * d];
        for (c, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                values[t * d + c] = v;
            }
        }
        Ok(Dataset {
            values,
            len,
            names,
            frequency: String::new(),
        })
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of variables `D`.
    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.channels();
        &self.values[t * d..(t + 1) * d]
    }

    /// Copy of channel `c` over `[start, end)`.
    pub fn slice(&self, c: usize, start: usize, end: usize) -> Vec<f64> {
        (start..end).map(|t| self.value(t, c)).collect()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.slice(c, 0, self.len)
    }

    pub(crate) fn map_channels(&self, f: impl Fn(usize, f64) -> f64) -> Dataset {
        let d = self.channels();
        let values = self.values.iter().enumerate().map(|(i, &v)| f(i % d, v)).collect();
        Dataset {
            values,
            len: self.len,
            names: self.names.clone(),
            frequency: self.frequency.clone(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(&self.names).map_err(|e| csv_error(path, e))?;
        for t in 0..self.len {
            let rec: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data {
            path: path.to_path_buf(),
            row,
            message: format!("{other:?}"),
        },
    }
}

/// How the leading column of a CSV is treated.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum TimestampColumn {
    /// Skip the first column when its header is `date` or `timestamp`.
    #[default]
    Auto,
    None,
    /// Skip the first column unconditionally.
    Present,
}

#[derive(Clone, Debug, Default)]
pub struct CsvSchema {
    pub timestamp: TimestampColumn,
    /// Minimum number of data rows (e.g. `L + H_min`).
    pub min_rows: Option<usize>,
    pub frequency: String,
}

/// Loads a headed CSV of numeric columns. Rows are numbered from 1 (first
/// data row after the header) in error messages.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let skip_first = match schema.timestamp {
        TimestampColumn::None => false,
        TimestampColumn::Present => true,
        TimestampColumn::Auto => headers
            .first()
            .is_some_and(|h| h.eq_ignore_ascii_case("date") || h.eq_ignore_ascii_case("timestamp")),
    };
    let offset = usize::from(skip_first);
    let names: Vec<String> = headers[offset.min(headers.len())..].to_vec();
    if names.is_empty() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            row: 0,
            message: "no value columns".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != headers.len() {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let values = rec
            .iter()
            .skip(offset)
            .zip(&names)
            .map(|(cell, name)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Data {
                    path: path.to_path_buf(),
                    row,
                    message: format!("column `{name}`: non-numeric cell `{cell}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    if let Some(min) = schema.min_rows {
        if rows.len() < min {
            return Err(Error::Data {
                path: path.to_path_buf(),
                row: rows.len(),
                message: format!("{} rows, need at least {min}", rows.len()),
            });
        }
    }
    let mut ds = Dataset::from_rows(names, rows)?;
    ds.frequency = schema.frequency.clone();
    Ok(ds)
}
