use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
    /// Drawn uniformly from `[0, 2π)` with the generator seed when absent.
    #[serde(default)]
    pub phase: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub components: Vec<Sinusoid>,
    #[serde(default)]
    pub trend: f64,
}

/// Each channel is `Σ a·sin(2πt/p + φ) + trend·t + N(0, σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: Vec<ChannelSpec>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Same sinusoid set and trend on every channel (phases still drawn per
    /// channel).
    pub fn uniform(channels: usize, length: usize, components: Vec<Sinusoid>, trend: f64, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            length,
            channels: vec![ChannelSpec { components, trend }; channels],
            noise_std,
            seed,
        }
    }

    /// Named presets. `sines-3ch`: 4000 steps, three channels mixing a fast
    /// and a slow period each, noise σ = 0.1, seed 20240601.
    pub fn preset(name: &str) -> Option<Self> {
        let s = |amplitude, period| Sinusoid {
            amplitude,
            period,
            phase: None,
        };
        match name {
            "sines-3ch" => Some(SynthSpec {
                length: 4000,
                channels: vec![
                    ChannelSpec {
                        components: vec![s(1.0, 24.0), s(0.5, 168.0)],
                        trend: 0.0,
                    },
                    ChannelSpec {
                        components: vec![s(0.8, 12.0), s(0.6, 96.0)],
                        trend: 2e-4,
                    },
                    ChannelSpec {
                        components: vec![s(0.7, 36.0), s(0.5, 120.0)],
                        trend: 0.0,
                    },
                ],
                noise_std: 0.1,
                seed: 20240601,
            }),
            _ => None,
        }
    }
}

pub fn synth_series(spec: &SynthSpec) -> Result<Dataset> {
    if spec.length == 0 || spec.channels.is_empty() {
        return Err(Error::config("synth", "length and channel count must be >= 1"));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::config("synth.noise_std", "must be non-negative"));
    }
    if let Some(c) = spec.channels.iter().flat_map(|c| &c.components).find(|c| !(c.period > 0.0)) {
        return Err(Error::config("synth.period", format!("period {} must be positive", c.period)));
    }
    // Phases and noise come from separate streams so the noise level does not
    // shift the phases.
    let mut phase_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("synth.noise_std", e.to_string()))?;

    let phases: Vec<Vec<f64>> = spec
        .channels
        .iter()
        .map(|ch| {
            ch.components
                .iter()
                .map(|c| c.phase.unwrap_or_else(|| phase_rng.gen_range(0.0..TAU)))
                .collect()
        })
        .collect();
    let d = spec.channels.len();
    let mut rows = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let tf = t as f64;
        let mut row = Vec::with_capacity(d);
        for (ch, ph) in spec.channels.iter().zip(&phases) {
            let mut v = ch.trend * tf;
            for (c, &phi) in ch.components.iter().zip(ph) {
                v += c.amplitude * (TAU * tf / c.period + phi).sin();
            }
            v += noise.sample(&mut noise_rng);
            row.push(v);
        }
        rows.push(row);
    }
    let names = (0..d).map(|c| format!("ch{c}")).collect();
    let mut ds = Dataset::from_rows(names, rows)?;
    ds.frequency = "synthetic".into();
    Ok(ds)
}
