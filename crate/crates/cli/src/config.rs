//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` tables, plus command-line overrides.
//!
//! ```toml
//! [data]
//! preset = "sines-3ch"        # or: csv = "ETTh1.csv", or a [data.synth] table
//! split = [2400, 700, 900]    # explicit sizes, or fractions such as [0.7, 0.1, 0.2]
//! train_stride = 1
//! eval_stride = 32            # defaults to model.h_out
//!
//! [model]
//! preset = "small"            # small | base | desk; other keys override fields
//! omega = [4, 5, 5, 4]
//!
//! [train]
//! max_epochs = 10
//!
//! [eval]
//! horizons = [96, 192, 336, 720]
//! ```

use std::path::{Path, PathBuf};

use segmoe_core::backbone::ModelConfig;
use segmoe_core::data::{
    chronological_split, load_csv, synth_series, CsvSchema, Dataset, Scaler, SplitSizes, SplitSpec, SynthSpec,
};
use segmoe_core::segmoe::OmegaSpec;
use segmoe_core::trainer::TrainConfig;
use segmoe_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_PRESET: &str = "sines-3ch";
pub const DEFAULT_HORIZONS: [usize; 4] = [96, 192, 336, 720];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default = "default_split")]
    pub split: SplitSizes,
    #[serde(default = "one")]
    pub train_stride: usize,
    #[serde(default)]
    pub eval_stride: Option<usize>,
}

fn default_split() -> SplitSizes {
    SplitSizes::Explicit([2400, 700, 900])
}

fn one() -> usize {
    1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preset: None,
            csv: None,
            synth: None,
            split: default_split(),
            train_stride: 1,
            eval_stride: None,
        }
    }
}

/// Where the series comes from once the config is resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthSpec),
}

impl DataConfig {
    pub fn source(&self) -> Result<DataSource> {
        let given = [self.preset.is_some(), self.csv.is_some(), self.synth.is_some()];
        if given.iter().filter(|g| **g).count() > 1 {
            return Err(Error::config("data", "set only one of `preset`, `csv` and `synth`"));
        }
        if let Some(path) = &self.csv {
            return Ok(DataSource::Csv(path.clone()));
        }
        if let Some(spec) = &self.synth {
            return Ok(DataSource::Synth(spec.clone()));
        }
        let name = self.preset.as_deref().unwrap_or(DEFAULT_PRESET);
        SynthSpec::preset(name)
            .map(DataSource::Synth)
            .ok_or_else(|| Error::config("data.preset", format!("unknown preset `{name}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
}

fn default_horizons() -> Vec<usize> {
    DEFAULT_HORIZONS.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: default_horizons(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::small(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "small" => Ok(ModelConfig::small()),
        "base" => Ok(ModelConfig::base()),
        "desk" => Ok(ModelConfig::desk()),
        other => Err(Error::config("model.preset", format!("unknown preset `{other}` (small, base, desk)"))),
    }
}

fn toml_error(field: &str, e: impl std::fmt::Display) -> Error {
    Error::config(field, e.to_string().trim().replace('\n', " "))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    data: Option<toml::Value>,
    #[serde(default)]
    model: Option<toml::Table>,
    #[serde(default)]
    train: Option<toml::Value>,
    #[serde(default)]
    eval: Option<toml::Value>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawRun = toml::from_str(text).map_err(|e| toml_error("config", e))?;
        let data = match raw.data {
            Some(v) => v.try_into().map_err(|e| toml_error("data", e))?,
            None => DataConfig::default(),
        };
        let model = match raw.model {
            Some(mut table) => {
                let preset = match table.remove("preset") {
                    Some(toml::Value::String(s)) => s,
                    Some(other) => return Err(Error::config("model.preset", format!("expected a string, got {other}"))),
                    None => "small".to_string(),
                };
                let base = toml::Value::try_from(model_preset(&preset)?).map_err(|e| toml_error("model", e))?;
                let mut merged = match base {
                    toml::Value::Table(t) => t,
                    _ => unreachable!("model config serializes to a table"),
                };
                merged.extend(table);
                toml::Value::Table(merged).try_into().map_err(|e| toml_error("model", e))?
            }
            None => ModelConfig::small(),
        };
        let train = match raw.train {
            Some(v) => v.try_into().map_err(|e| toml_error("train", e))?,
            None => TrainConfig::default(),
        };
        let eval = match raw.eval {
            Some(v) => v.try_into().map_err(|e| toml_error("eval", e))?,
            None => EvalConfig::default(),
        };
        Ok(RunConfig {
            data,
            model,
            train,
            eval,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn eval_stride(&self) -> usize {
        self.data.eval_stride.unwrap_or(self.model.h_out)
    }

    /// Checks every field that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.source()?;
        if self.data.train_stride == 0 {
            return Err(Error::config("data.train_stride", "must be >= 1"));
        }
        if self.data.eval_stride == Some(0) {
            return Err(Error::config("data.eval_stride", "must be >= 1"));
        }
        if let SplitSizes::Fractions(f) = self.data.split {
            chronological_split(1_000_000, &SplitSizes::Fractions(f))?;
        }
        validate_horizons(&self.eval.horizons)
    }

    /// The effective configuration as TOML, with the model written out in
    /// full.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            data: &'a DataConfig,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            eval: &'a EvalConfig,
        }
        toml::to_string(&Out {
            data: &self.data,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
        })
        .expect("run config serializes")
    }
}

pub fn validate_horizons(horizons: &[usize]) -> Result<()> {
    if horizons.is_empty() {
        return Err(Error::config("eval.horizons", "at least one horizon is required"));
    }
    if let Some(h) = horizons.iter().find(|&&h| h == 0) {
        return Err(Error::config("eval.horizons", format!("horizon {h} must be >= 1")));
    }
    Ok(())
}

/// Comma-separated positive integers, e.g. `96,192,336,720`.
pub fn parse_usize_list(field: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::config(field, format!("`{t}` is not a non-negative integer")))
        })
        .collect()
}

pub fn parse_omega(s: &str) -> Result<OmegaSpec> {
    s.parse::<OmegaSpec>()
}

/// The series after loading, split and global standardization with
/// training-split statistics.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub raw: Dataset,
    pub data: Dataset,
    pub split: SplitSpec,
    pub scaler: Scaler,
}

pub fn prepare(cfg: &DataConfig, min_rows: usize) -> Result<Prepared> {
    let raw = match cfg.source()? {
        DataSource::Csv(path) => load_csv(
            &path,
            &CsvSchema {
                min_rows: Some(min_rows),
                ..CsvSchema::default()
            },
        )?,
        DataSource::Synth(spec) => synth_series(&spec)?,
    };
    if raw.len() < min_rows {
        return Err(Error::Invalid(format!(
            "series has {} rows, at least {min_rows} are needed",
            raw.len()
        )));
    }
    let split = chronological_split(raw.len(), &cfg.split)?;
    let scaler = Scaler::fit(&raw, split.train.clone())?;
    let data = scaler.transform(&raw);
    Ok(Prepared {
        raw,
        data,
        split,
        scaler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.eval_stride(), 32);
        c.validate().unwrap();
    }

    #[test]
    fn model_overrides_merge_onto_preset() {
        let c = RunConfig::from_toml_str("[model]\npreset = \"desk\"\nomega = [1, 2]\nd_model = 32\n").unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.omega, OmegaSpec::PerBlock(vec![1, 2]));
        assert_eq!(c.model.experts, ModelConfig::desk().experts);
        let c = RunConfig::from_toml_str("[model]\nomega = 5\n").unwrap();
        assert_eq!(c.model.omega, OmegaSpec::Uniform(5));
    }

    #[test]
    fn unknown_fields_name_the_table() {
        for text in [
            "[model]\nd_modle = 3\n",
            "[train]\nlearning_rate = 1.0\n",
            "[data]\nsplit = [1, 2, 3]\nbogus = 1\n",
            "[other]\nx = 1\n",
        ] {
            let e = RunConfig::from_toml_str(text).unwrap_err();
            assert!(e.is_validation(), "{text}: {e}");
        }
    }

    #[test]
    fn validation_catches_field_errors() {
        let mut c = RunConfig::default();
        c.eval.horizons = vec![96, 0];
        assert!(c.validate().unwrap_err().to_string().contains("eval.horizons"));
        let mut c = RunConfig::default();
        c.data.csv = Some("x.csv".into());
        c.data.preset = Some("sines-3ch".into());
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.top_k = 5;
        assert!(c.validate().unwrap_err().is_validation());
        let mut c = RunConfig::default();
        c.data.split = SplitSizes::Fractions([0.7, 0.3, 0.2]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_usize_list("h", "96, 192,336").unwrap(), vec![96, 192, 336]);
        assert!(parse_usize_list("h", "96,x").is_err());
        assert_eq!(parse_omega("4,5").unwrap(), OmegaSpec::PerBlock(vec![4, 5]));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.model = ModelConfig::desk();
        c.data.eval_stride = Some(8);
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_data_is_standardized_on_train() {
        let p = prepare(&DataConfig::default(), 1).unwrap();
        assert_eq!(p.split.test, 3100..4000);
        for c in 0..p.data.channels() {
            let v = p.data.slice(c, 0, 2400);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }
}
