use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmoe::{multi_resolution_schedule, OmegaSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Final RMSNorm, flatten all `M·d_model` activations, linear map to `H_o`.
    #[default]
    Flatten,
    /// Linear map from the last token only.
    LastToken,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_true() -> bool {
    true
}

/// Architecture of the forecaster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub d_model: usize,
    /// Hidden width of every expert.
    pub d_ff: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub patch_len: usize,
    /// Look-back window length `L`.
    pub lookback: usize,
    /// Output length per forward pass, `H_o`.
    pub h_out: usize,
    /// Routed experts `N`.
    pub experts: usize,
    /// Active routed experts per segment `K`.
    pub top_k: usize,
    /// Segment length: one value for all blocks or one per block.
    pub omega: OmegaSpec,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub droppath_max: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_true")]
    pub shared_expert: bool,
    #[serde(default)]
    pub head: HeadKind,
}

impl ModelConfig {
    /// 4 blocks, 4 query / 2 KV heads, 4 experts with K = 1, d_model 128,
    /// d_ff 256; P = 8, H_o = 32, L = 512, ω = [4, 5, 5, 4].
    pub fn small() -> Self {
        ModelConfig {
            blocks: 4,
            d_model: 128,
            d_ff: 256,
            q_heads: 4,
            kv_heads: 2,
            patch_len: 8,
            lookback: 512,
            h_out: 32,
            experts: 4,
            top_k: 1,
            omega: OmegaSpec::PerBlock(vec![4, 5, 5, 4]),
            dropout: 0.2,
            droppath_max: 0.3,
            rope_base: default_rope_base(),
            shared_expert: true,
            head: HeadKind::Flatten,
        }
    }

    /// 6 blocks, 8 query / 4 KV heads, 8 experts with K = 1, d_model 256,
    /// d_ff 512.
    pub fn base() -> Self {
        ModelConfig {
            blocks: 6,
            d_model: 256,
            d_ff: 512,
            q_heads: 8,
            kv_heads: 4,
            experts: 8,
            omega: OmegaSpec::PerBlock(vec![5, 5, 4, 4, 3, 3]),
            ..Self::small()
        }
    }

    /// Laptop-scale configuration used by the synthetic benchmarks: two
    /// blocks of width 16.
    pub fn desk() -> Self {
        ModelConfig {
            blocks: 2,
            d_model: 16,
            d_ff: 32,
            q_heads: 2,
            kv_heads: 1,
            patch_len: 8,
            lookback: 512,
            h_out: 32,
            experts: 4,
            top_k: 1,
            omega: OmegaSpec::Uniform(4),
            dropout: 0.0,
            droppath_max: 0.0,
            rope_base: default_rope_base(),
            shared_expert: true,
            head: HeadKind::Flatten,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.q_heads.max(1)
    }

    /// Number of patch tokens `M = ceil(L / P)`.
    pub fn tokens(&self) -> usize {
        self.lookback.div_ceil(self.patch_len.max(1))
    }

    pub fn omega_schedule(&self) -> Result<Vec<usize>> {
        multi_resolution_schedule(&self.omega, self.blocks)
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("q_heads", self.q_heads),
            ("kv_heads", self.kv_heads),
            ("patch_len", self.patch_len),
            ("lookback", self.lookback),
            ("h_out", self.h_out),
            ("experts", self.experts),
            ("top_k", self.top_k),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.q_heads % self.kv_heads != 0 {
            return Err(Error::config(
                "kv_heads",
                format!("q_heads ({}) must be a multiple of kv_heads ({})", self.q_heads, self.kv_heads),
            ));
        }
        if self.d_model % self.q_heads != 0 {
            return Err(Error::config(
                "q_heads",
                format!("d_model ({}) must be divisible by q_heads ({})", self.d_model, self.q_heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(
                "d_model",
                format!("head dimension {} must be even for rotary embeddings", self.head_dim()),
            ));
        }
        if self.top_k > self.experts {
            return Err(Error::config(
                "top_k",
                format!("top_k ({}) exceeds experts ({})", self.top_k, self.experts),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.droppath_max) {
            return Err(Error::config("droppath_max", "must lie in [0, 1)"));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::config("rope_base", "must exceed 1"));
        }
        self.omega_schedule()?;
        Ok(())
    }
}
