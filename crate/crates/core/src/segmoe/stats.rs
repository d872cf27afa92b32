use super::RouteDecision;
use crate::error::{Error, Result};

/// Load statistics of one layer: `f_i` is the fraction of the `K·C`
/// selections that went to expert `i`, `r_i` its mean router probability.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    pub f: Vec<f64>,
    pub r: Vec<f64>,
    /// Shannon entropy of `f` in nats.
    pub entropy: f64,
    pub segments: usize,
}

pub fn usage_entropy(f: &[f64]) -> f64 {
    -f.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Running sums across batches (segments are visited in batch order, so the
/// result is deterministic).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingAccumulator {
    counts: Vec<u64>,
    score_sums: Vec<f64>,
    segments: usize,
    selections: u64,
}

impl RoutingAccumulator {
    pub fn new(experts: usize) -> Self {
        RoutingAccumulator {
            counts: vec![0; experts],
            score_sums: vec![0.0; experts],
            segments: 0,
            selections: 0,
        }
    }

    pub fn add(&mut self, d: &RouteDecision) {
        if self.counts.is_empty() {
            *self = Self::new(d.experts());
        }
        let n = d.experts();
        for (row, sel) in d.selected.iter().enumerate() {
            for &i in sel {
                self.counts[i] += 1;
                self.selections += 1;
            }
            for (s, v) in self.score_sums.iter_mut().zip(&d.scores.data()[row * n..(row + 1) * n]) {
                *s += v;
            }
        }
        self.segments += d.segments();
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn finish(&self) -> Result<RoutingStats> {
        if self.segments == 0 {
            return Err(Error::Invalid("routing statistics need at least one segment".into()));
        }
        let f: Vec<f64> = self.counts.iter().map(|&c| c as f64 / self.selections as f64).collect();
        let r = self.score_sums.iter().map(|&s| s / self.segments as f64).collect();
        Ok(RoutingStats {
            entropy: usage_entropy(&f),
            f,
            r,
            segments: self.segments,
        })
    }
}

pub fn routing_stats(decisions: &[&RouteDecision]) -> Result<RoutingStats> {
    let mut acc = RoutingAccumulator::default();
    for d in decisions {
        acc.add(d);
    }
    acc.finish()
}
