//! Closed-form parameter counts.

use std::fmt::Write as _;

use segmoe_core::backbone::{HeadKind, ModelConfig};
use segmoe_core::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    /// `embed`, `blocks.{b}` or `head` (final norm + projection).
    pub name: String,
    pub total: usize,
    pub activated: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub rows: Vec<ParamRow>,
    pub total: usize,
    pub activated: usize,
}

impl ParamCount {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("part,total,activated\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.total, r.activated);
        }
        let _ = writeln!(s, "all,{},{}", self.total, self.activated);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>12}\n", "part", "total", "activated");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>12} {:>12}", r.name, r.total, r.activated);
        }
        let _ = writeln!(s, "{:<10} {:>12} {:>12}", "all", self.total, self.activated);
        s
    }
}

/// Weights of one two-layer expert on segments of width `w`.
fn expert(w: usize, d_ff: usize) -> usize {
    w * d_ff + d_ff + d_ff * w + w
}

/// Total and activated parameters. A token activates every weight except
/// the `N − K` routed experts it was not sent to.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let mut rows = vec![ParamRow {
        name: "embed".into(),
        total: cfg.patch_len * d + d,
        activated: cfg.patch_len * d + d,
    }];
    for (b, omega) in cfg.omega_schedule()?.into_iter().enumerate() {
        let attn = d * cfg.q_heads * hd + 2 * d * cfg.kv_heads * hd + cfg.q_heads * hd * d;
        let w = omega * d;
        let e = expert(w, cfg.d_ff);
        let shared = if cfg.shared_expert { e + w + 1 } else { 0 };
        let total = 2 * d + attn + w * cfg.experts + cfg.experts * e + shared;
        rows.push(ParamRow {
            name: format!("blocks.{b}"),
            total,
            activated: total - (cfg.experts - cfg.top_k) * e,
        });
    }
    let head_in = match cfg.head {
        HeadKind::Flatten => cfg.tokens() * d,
        HeadKind::LastToken => d,
    };
    let head = d + head_in * cfg.h_out + cfg.h_out;
    rows.push(ParamRow {
        name: "head".into(),
        total: head,
        activated: head,
    });
    Ok(ParamCount {
        total: rows.iter().map(|r| r.total).sum(),
        activated: rows.iter().map(|r| r.activated).sum(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use segmoe_core::backbone::SegMoeModel;
    use segmoe_core::segmoe::OmegaSpec;

    use super::*;

    #[test]
    fn matches_initialized_model() {
        for cfg in [ModelConfig::desk(), ModelConfig::small()] {
            let m = SegMoeModel::new(cfg.clone(), 0).unwrap();
            let c = count_params(&cfg).unwrap();
            assert_eq!(c.total, m.store().numel());
        }
    }

    #[test]
    fn activated_equals_total_iff_all_experts_active() {
        let mut cfg = ModelConfig::desk();
        for k in 1..=cfg.experts {
            cfg.top_k = k;
            let c = count_params(&cfg).unwrap();
            assert!(c.activated <= c.total);
            assert_eq!(c.activated == c.total, k == cfg.experts);
        }
    }

    #[test]
    fn total_grows_with_uniform_omega() {
        let count = |w| {
            let cfg = ModelConfig {
                omega: OmegaSpec::Uniform(w),
                ..ModelConfig::small()
            };
            count_params(&cfg).unwrap().total
        };
        assert!(count(2) < count(5));
    }
}
