//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use segmoe_core::data::{synth_series, SynthSpec};
use segmoe_core::{Error, Result};

use crate::ablate::{ablate, Variant};
use crate::accounting::count_params;
use crate::config::{parse_omega, parse_usize_list, prepare, RunConfig};
use crate::evaluate::{evaluate, export_forecast};
use crate::forecast::{ModelForecaster, Persistence};
use crate::run::{load_model, train_run};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "segmoe", version, about = "Train, evaluate and ablate segment-wise MoE forecasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.bin, history.csv, routing.csv and run.toml.
    Train(Common),
    /// Evaluate a checkpoint on the test split at every horizon.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export one test window's forecast as CSV.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Window index within the test split (channel-minor).
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, default_value_t = 96)]
        horizon: usize,
    },
    /// Compare segment resolutions over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// ω schedule per variant, scalar or comma list; repeat the flag.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
    /// Print total and activated parameter counts.
    Params(Common),
    /// Write a synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value = "sines-3ch")]
        preset: String,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV dataset; replaces the configured data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated forecast horizons.
    #[arg(long)]
    pub horizons: Option<String>,
    /// Segment length: a scalar or a per-block comma list.
    #[arg(long)]
    pub omega: Option<String>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    #[arg(long)]
    pub h_out: Option<usize>,
}

impl Common {
    /// Loads `--config` (or `fallback`, or defaults) and applies the flags.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.exists() => RunConfig::load(p)?,
            _ => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = &self.data {
            cfg.data.csv = Some(p.clone());
            cfg.data.preset = None;
            cfg.data.synth = None;
        }
        if let Some(h) = &self.horizons {
            cfg.eval.horizons = parse_usize_list("horizons", h)?;
        }
        if let Some(w) = &self.omega {
            cfg.model.omega = parse_omega(w)?;
        }
        if let Some(p) = self.patch_len {
            cfg.model.patch_len = p;
        }
        if let Some(h) = self.h_out {
            cfg.model.h_out = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Minimum series length: one look-back plus one output window.
fn min_rows(cfg: &RunConfig) -> usize {
    cfg.model.lookback + cfg.model.h_out
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

/// Replaces the model part of `cfg` with the checkpoint's, keeping data and
/// evaluation settings.
fn with_checkpoint_model(mut cfg: RunConfig, model: &segmoe_core::backbone::SegMoeModel) -> RunConfig {
    cfg.model = model.config().clone();
    cfg
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve(None)?;
            let out = common.out_dir()?;
            let prepared = prepare(&cfg.data, min_rows(&cfg))?;
            let (_, outcome) = train_run(&cfg, &prepared)?;
            outcome.checkpoint.save(out.join("checkpoint.bin"))?;
            outcome.history.write(out.join("history.csv"), out.join("routing.csv"))?;
            write(out.join("run.toml"), &cfg.to_toml())?;
            println!(
                "best epoch {} (validation loss {:.6}); {} epochs{}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.best_val_loss,
                outcome.history.epochs.len(),
                if outcome.stopped_early { ", stopped early" } else { "" }
            );
        }
        Command::Eval { common, checkpoint } => {
            let fallback = checkpoint.parent().map(|d| d.join("run.toml"));
            let cfg = common.resolve(fallback.as_deref())?;
            let model = load_model(&checkpoint)?;
            let cfg = with_checkpoint_model(cfg, &model);
            let out = common.out_dir()?;
            let prepared = prepare(&cfg.data, min_rows(&cfg))?;
            let test = prepared.split.test.clone();
            let stride = cfg.eval_stride();
            let forecaster = ModelForecaster {
                model: &model,
                batch_size: cfg.train.batch_size,
            };
            let table = evaluate(&forecaster, &prepared.data, test.clone(), &cfg.eval.horizons, stride)?;
            let baseline = Persistence {
                lookback: cfg.model.lookback,
            };
            let base = evaluate(&baseline, &prepared.data, test, &cfg.eval.horizons, stride)?;
            write(out.join("metrics.csv"), &table.to_csv())?;
            write(out.join("metrics.txt"), &table.to_text())?;
            write(out.join("persistence.csv"), &base.to_csv())?;
            print!("{}\n{}", table.to_text(), base.to_text());
        }
        Command::Forecast {
            common,
            checkpoint,
            window,
            horizon,
        } => {
            if horizon == 0 {
                return Err(Error::config("horizon", "must be >= 1"));
            }
            let fallback = checkpoint.parent().map(|d| d.join("run.toml"));
            let cfg = common.resolve(fallback.as_deref())?;
            let model = load_model(&checkpoint)?;
            let cfg = with_checkpoint_model(cfg, &model);
            let out = common.out_dir()?;
            let prepared = prepare(&cfg.data, min_rows(&cfg))?;
            let forecaster = ModelForecaster {
                model: &model,
                batch_size: 1,
            };
            let path = out.join(format!("forecast_w{window}_h{horizon}.csv"));
            export_forecast(
                &forecaster,
                &prepared.data,
                prepared.split.test.clone(),
                cfg.eval_stride(),
                window,
                horizon,
                &path,
            )?;
            println!("wrote {}", path.display());
        }
        Command::Ablate {
            common,
            variants,
            seeds,
        } => {
            let cfg = common.resolve(None)?;
            let variants = variants
                .iter()
                .map(|v| parse_omega(v).map(Variant::new))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = parse_usize_list("seeds", &seeds)?.into_iter().map(|s| s as u64).collect();
            let out = common.out_dir()?;
            let prepared = prepare(&cfg.data, min_rows(&cfg))?;
            let report = ablate(&cfg, &prepared, &variants, &seeds)?;
            write(out.join("ablation_runs.csv"), &report.runs_csv())?;
            write(out.join("ablation.csv"), &report.summary_csv())?;
            write(out.join("ablation.txt"), &report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::Params(common) => {
            let cfg = common.resolve(None)?;
            let count = count_params(&cfg.model)?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)?;
                write(dir.join("params.csv"), &count.to_csv())?;
            }
            print!("{}", count.to_text());
        }
        Command::Synth {
            preset,
            length,
            noise,
            seed,
            out,
        } => {
            let mut spec = SynthSpec::preset(&preset)
                .ok_or_else(|| Error::config("preset", format!("unknown preset `{preset}`")))?;
            if let Some(n) = length {
                spec.length = n;
            }
            if let Some(s) = noise {
                spec.noise_std = s;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let ds = synth_series(&spec)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            ds.write_csv(&out)?;
            println!("wrote {} rows x {} channels to {}", ds.len(), ds.channels(), out.display());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
