//! Segment-resolution ablation: the same run repeated over seeds for each
//! ω schedule.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use segmoe_core::segmoe::OmegaSpec;
use segmoe_core::{Error, Result};

use crate::config::{Prepared, RunConfig};
use crate::evaluate::evaluate;
use crate::forecast::ModelForecaster;
use crate::run::train_run;

pub const THREADS_ENV: &str = "SEGMOE_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub id: String,
    pub omega: OmegaSpec,
}

impl Variant {
    pub fn new(omega: OmegaSpec) -> Self {
        Variant {
            id: format!("omega={omega}"),
            omega,
        }
    }
}

/// Result of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    /// Average-row MSE / MAE of the test table.
    pub avg_mse: f64,
    pub avg_mae: f64,
    /// Final-epoch expert-usage entropy, averaged over layers.
    pub entropy: f64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Best,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub runs: Vec<SeedRun>,
    /// Means over seeds; `None` when any seed failed.
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub mark: Option<Mark>,
}

impl VariantResult {
    pub fn failed(&self) -> bool {
        self.mse.is_none()
    }

    pub fn metrics(&self) -> Vec<&RunMetrics> {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub protocol: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantResult>,
}

impl AblationReport {
    /// One line per (variant, seed), variants then seeds in input order.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,avg_mse,avg_mae,entropy,epochs,status\n");
        for row in &self.rows {
            for r in &row.runs {
                match &r.outcome {
                    Ok(m) => {
                        let _ = writeln!(
                            s,
                            "{},{},{},{},{},{},ok",
                            row.variant.id, r.seed, m.avg_mse, m.avg_mae, m.entropy, m.epochs
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(s, "{},{},NA,NA,NA,NA,\"failed: {}\"", row.variant.id, r.seed, e.replace('"', "'"));
                    }
                }
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,mse,mae,mark,status\n");
        for row in &self.rows {
            let num = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                row.variant.id,
                num(row.mse),
                num(row.mae),
                mark_label(row.mark),
                if row.failed() { "failed" } else { "ok" }
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("{}\nseeds: {}\n", self.protocol, seeds.join(","));
        let _ = writeln!(s, "{:<20} {:>12} {:>12}  mark", "variant", "avg MSE", "avg MAE");
        for row in &self.rows {
            match (row.mse, row.mae) {
                (Some(mse), Some(mae)) => {
                    let _ = writeln!(s, "{:<20} {:>12.6} {:>12.6}  {}", row.variant.id, mse, mae, mark_label(row.mark));
                }
                _ => {
                    let _ = writeln!(s, "{:<20} {:>12} {:>12}", row.variant.id, "failed", "failed");
                }
            }
        }
        s
    }
}

fn mark_label(m: Option<Mark>) -> &'static str {
    match m {
        Some(Mark::Best) => "best",
        Some(Mark::Second) => "second",
        None => "",
    }
}

/// The fixed part of the protocol, e.g. `P=8, d_model=128, N=4, K=1`.
pub fn protocol_echo(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    format!("P={}, d_model={}, N={}, K={}", m.patch_len, m.d_model, m.experts, m.top_k)
}

/// Worker count: `SEGMOE_THREADS` if set, else the available cores, never
/// more than `jobs`.
pub fn worker_count(jobs: usize) -> Result<usize> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, usize::from),
    };
    Ok(cap.min(jobs).max(1))
}

fn run_one(base: &RunConfig, prepared: &Prepared, omega: &OmegaSpec, seed: u64) -> Result<RunMetrics> {
    let mut cfg = base.clone();
    cfg.model.omega = omega.clone();
    cfg.train.seed = seed;
    let (model, outcome) = train_run(&cfg, prepared)?;
    let forecaster = ModelForecaster {
        model: &model,
        batch_size: cfg.train.batch_size,
    };
    let table = evaluate(
        &forecaster,
        &prepared.data,
        prepared.split.test.clone(),
        &cfg.eval.horizons,
        cfg.eval_stride(),
    )?;
    let avg = table.average();
    if avg.skipped() {
        return Err(Error::Invalid("no horizon fits the test split".into()));
    }
    let entropy = outcome.history.final_entropy();
    Ok(RunMetrics {
        avg_mse: avg.mse,
        avg_mae: avg.mae,
        entropy: entropy.iter().sum::<f64>() / entropy.len().max(1) as f64,
        epochs: outcome.history.epochs.len(),
    })
}

/// Trains every variant under every seed. Each run builds its own model from
/// the shared read-only data, so runs do not influence each other and the
/// report is ordered by variant and seed regardless of scheduling.
pub fn ablate(base: &RunConfig, prepared: &Prepared, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablate", "needs at least one variant and one seed"));
    }
    let mut ids = HashSet::new();
    for v in variants {
        if !ids.insert(v.id.as_str()) {
            return Err(Error::config("variants", format!("duplicate variant `{}`", v.id)));
        }
    }
    let mut seen = HashSet::new();
    if let Some(s) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::config("seeds", format!("duplicate seed {s}")));
    }
    for v in variants {
        let mut cfg = base.clone();
        cfg.model.omega = v.omega.clone();
        cfg.validate()?;
    }
    let protocol = protocol_echo(base);
    if protocol != "P=8, d_model=128, N=4, K=1" {
        log::warn!("ablation protocol differs from the reference setting: {protocol}");
    }
    log::info!("{protocol}");

    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Mutex<Vec<Option<SeedRun>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = worker_count(jobs.len())?;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, seed)) = jobs.get(j) else { break };
                let outcome = run_one(base, prepared, &variants[v].omega, seed).map_err(|e| e.to_string());
                match &outcome {
                    Ok(m) => log::info!("{} seed {seed}: avg MSE {:.6}", variants[v].id, m.avg_mse),
                    Err(e) => log::warn!("{} seed {seed} failed: {e}", variants[v].id),
                }
                results.lock().expect("result slots")[j] = Some(SeedRun { seed, outcome });
            });
        }
    });
    let mut results = results.into_inner().expect("result slots").into_iter();

    let mut rows: Vec<VariantResult> = variants
        .iter()
        .map(|v| {
            let runs: Vec<SeedRun> = (&mut results).take(seeds.len()).map(|r| r.expect("every job ran")).collect();
            let ok: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let (mse, mae) = if ok.len() == runs.len() {
                let n = ok.len() as f64;
                (
                    Some(ok.iter().map(|m| m.avg_mse).sum::<f64>() / n),
                    Some(ok.iter().map(|m| m.avg_mae).sum::<f64>() / n),
                )
            } else {
                (None, None)
            };
            VariantResult {
                variant: v.clone(),
                runs,
                mse,
                mae,
                mark: None,
            }
        })
        .collect();
    let mut ranked: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].failed()).collect();
    ranked.sort_by(|&a, &b| rows[a].mse.partial_cmp(&rows[b].mse).expect("finite means").then(a.cmp(&b)));
    for (place, &i) in ranked.iter().take(2).enumerate() {
        rows[i].mark = Some(if place == 0 { Mark::Best } else { Mark::Second });
    }
    Ok(AblationReport {
        protocol,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_variants_rejected() {
        let cfg = RunConfig::default();
        let prepared = crate::config::prepare(&cfg.data, 1).unwrap();
        let v = [Variant::new(OmegaSpec::Uniform(1)), Variant::new(OmegaSpec::Uniform(1))];
        let e = ablate(&cfg, &prepared, &v, &[0]).unwrap_err();
        assert!(e.is_validation() && e.to_string().contains("duplicate"));
    }

    #[test]
    fn reference_protocol_echo() {
        assert_eq!(protocol_echo(&RunConfig::default()), "P=8, d_model=128, N=4, K=1");
    }
}
