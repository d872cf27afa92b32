//! Segment-wise mixture of experts.
//!
//! A block's token sequence `[M, d]` is cut into `C = ceil(M/ω)` segments of
//! `ω` consecutive tokens. Each segment is flattened to one `ω·d` vector,
//! routed as a unit to its Top-K experts and transformed as a unit. With
//! `ω = 1` this is an ordinary token-wise MoE.

mod layer;
pub mod reference;
mod route;
mod segment;
mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layer::{ExpertParams, LayerRouting, MoeOptions, SegMoeLayer};
pub use route::{route, top_k, RouteDecision};
pub use segment::{segment_tokens, unsegment_tokens, SegBatch};
pub use stats::{routing_stats, usage_entropy, RoutingAccumulator, RoutingStats};

/// Segment length for every block, or one value per block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OmegaSpec {
    Uniform(usize),
    PerBlock(Vec<usize>),
}

impl std::fmt::Display for OmegaSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OmegaSpec::Uniform(w) => write!(f, "{w}"),
            OmegaSpec::PerBlock(ws) => {
                let parts: Vec<String> = ws.iter().map(usize::to_string).collect();
                write!(f, "[{}]", parts.join(","))
            }
        }
    }
}

impl std::str::FromStr for OmegaSpec {
    type Err = Error;

    /// `"5"` or `"4,5,5,4"` (brackets optional).
    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().trim_start_matches('[').trim_end_matches(']');
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config("omega", format!("`{}` is not a positive integer", p.trim())))
        };
        if body.contains(',') {
            Ok(OmegaSpec::PerBlock(body.split(',').map(parse).collect::<Result<_>>()?))
        } else {
            Ok(OmegaSpec::Uniform(parse(body)?))
        }
    }
}

/// Expands an [`OmegaSpec`] to one segment length per block.
pub fn multi_resolution_schedule(spec: &OmegaSpec, blocks: usize) -> Result<Vec<usize>> {
    let schedule = match spec {
        OmegaSpec::Uniform(w) => vec![*w; blocks],
        OmegaSpec::PerBlock(ws) => {
            if ws.len() != blocks {
                return Err(Error::config(
                    "omega",
                    format!("schedule has {} entries but the model has {blocks} blocks", ws.len()),
                ));
            }
            ws.clone()
        }
    };
    if schedule.iter().any(|&w| w == 0) {
        return Err(Error::config("omega", "segment lengths must be >= 1"));
    }
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(multi_resolution_schedule(&OmegaSpec::Uniform(5), 4).unwrap(), vec![5; 4]);
        let table = OmegaSpec::PerBlock(vec![4, 5, 5, 4]);
        assert_eq!(multi_resolution_schedule(&table, 4).unwrap(), vec![4, 5, 5, 4]);
        assert!(multi_resolution_schedule(&OmegaSpec::PerBlock(vec![5, 4]), 4).is_err());
        assert!(multi_resolution_schedule(&OmegaSpec::Uniform(0), 2).is_err());
    }

    #[test]
    fn omega_parsing() {
        assert_eq!("5".parse::<OmegaSpec>().unwrap(), OmegaSpec::Uniform(5));
        assert_eq!("[4, 5,5,4]".parse::<OmegaSpec>().unwrap(), OmegaSpec::PerBlock(vec![4, 5, 5, 4]));
        assert!("x".parse::<OmegaSpec>().is_err());
        assert_eq!(OmegaSpec::PerBlock(vec![1, 2]).to_string(), "[1,2]");
    }
}
