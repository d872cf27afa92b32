use rand::Rng;

use super::{drop_path, droppath_rate, dropout, rmsnorm, Attention, ForwardCtx, ModelConfig};
use crate::error::Result;
use crate::params::{ones, Bound, ParamId, ParamStore};
use crate::segmoe::{LayerRouting, MoeOptions, SegMoeLayer};
use crate::tensor::{Graph, Var};

/// Pre-norm block:
/// `h = x + DropPath(Attn(Norm x))`, `out = h + DropPath(Dropout(SegMoE(Norm h)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: ParamId,
    pub attn: Attention,
    pub moe_norm: ParamId,
    pub moe: SegMoeLayer,
    pub droppath: f64,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, b: usize, omega: usize, rng: &mut impl Rng) -> Self {
        let prefix = format!("blocks.{b}");
        let attn_norm = store.add(format!("{prefix}.attn_norm.gain"), ones(&[cfg.d_model]));
        let attn = Attention::init(
            store,
            &format!("{prefix}.attn"),
            cfg.d_model,
            cfg.q_heads,
            cfg.kv_heads,
            cfg.rope_base,
            rng,
        );
        let moe_norm = store.add(format!("{prefix}.moe_norm.gain"), ones(&[cfg.d_model]));
        let moe = SegMoeLayer::init(
            store,
            &format!("{prefix}.moe"),
            cfg.d_model,
            cfg.d_ff,
            omega,
            cfg.experts,
            cfg.top_k,
            cfg.shared_expert,
            rng,
        );
        EncoderBlock {
            attn_norm,
            attn,
            moe_norm,
            moe,
            droppath: droppath_rate(b, cfg.blocks, cfg.droppath_max),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        key_valid: Option<&[bool]>,
        ctx: &mut ForwardCtx,
        opts: &MoeOptions,
    ) -> Result<(Var, LayerRouting)> {
        let n = rmsnorm(g, x, p.var(self.attn_norm))?;
        let (a, _) = self.attn.forward(g, p, n, key_valid, self.dropout, ctx)?;
        let a = drop_path(g, a, self.droppath, ctx)?;
        let h = g.add(x, a)?;
        let n = rmsnorm(g, h, p.var(self.moe_norm))?;
        let (f, routing) = self.moe.forward(g, p, n, opts)?;
        let f = dropout(g, f, self.dropout, ctx)?;
        let f = drop_path(g, f, self.droppath, ctx)?;
        Ok((g.add(h, f)?, routing))
    }
}
