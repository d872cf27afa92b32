use rand::Rng;

use super::route::RouteDecision;
use super::segment::{segment_tokens, unsegment_tokens};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Two-layer feed-forward expert `gelu(u·W1 + b1)·W2 + b2` on flattened
/// segments of width `ω·d`.
#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertParams {
    fn init(store: &mut ParamStore, prefix: &str, width: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        ExpertParams {
            w1: store.add(format!("{prefix}.w1"), xavier_uniform(rng, width, d_ff)),
            b1: store.add(format!("{prefix}.b1"), zeros(&[d_ff])),
            w2: store.add(format!("{prefix}.w2"), xavier_uniform(rng, d_ff, width)),
            b2: store.add(format!("{prefix}.b2"), zeros(&[width])),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &Bound, u: Var) -> Result<Var> {
        let h = g.matmul(u, p.var(self.w1))?;
        let h = g.add(h, p.var(self.b1))?;
        let h = g.gelu(h);
        let y = g.matmul(h, p.var(self.w2))?;
        g.add(y, p.var(self.b2))
    }
}

#[derive(Clone, Debug)]
pub struct SharedExpert {
    pub ffn: ExpertParams,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

/// One Seg-MoE feed-forward layer: router, `N` routed experts and an
/// optional sigmoid-gated shared expert.
#[derive(Clone, Debug)]
pub struct SegMoeLayer {
    pub omega: usize,
    pub d_model: usize,
    pub top_k: usize,
    pub router: ParamId,
    pub experts: Vec<ExpertParams>,
    pub shared: Option<SharedExpert>,
}

/// Per-call overrides, mostly for verification.
#[derive(Clone, Copy, Debug, Default)]
pub struct MoeOptions<'a> {
    /// Fixed expert choice per segment instead of Top-K.
    pub frozen: Option<&'a [Vec<usize>]>,
    /// Replaces the learned shared gate with a constant.
    pub shared_gate: Option<f64>,
    /// Raw content written into padded slots before masking.
    pub pad_fill: Option<Var>,
}

/// Routing of one layer call. `scores` is the graph node of the router
/// probabilities, used by the balance loss.
#[derive(Clone, Debug)]
pub struct LayerRouting {
    pub decision: RouteDecision,
    pub scores: Var,
}

impl SegMoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        omega: usize,
        experts: usize,
        top_k: usize,
        shared: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let width = omega * d_model;
        let router = store.add(format!("{prefix}.router"), xavier_uniform(rng, width, experts));
        let experts = (0..experts)
            .map(|i| ExpertParams::init(store, &format!("{prefix}.experts.{i}"), width, d_ff, rng))
            .collect();
        let shared = shared.then(|| SharedExpert {
            ffn: ExpertParams::init(store, &format!("{prefix}.shared"), width, d_ff, rng),
            gate_w: store.add(format!("{prefix}.shared_gate.weight"), xavier_uniform(rng, width, 1)),
            gate_b: store.add(format!("{prefix}.shared_gate.bias"), zeros(&[1])),
        });
        SegMoeLayer {
            omega,
            d_model,
            top_k,
            router,
            experts,
            shared,
        }
    }

    /// `x`: `[Bt, M, d]` normalized tokens. Returns `[Bt, M, d]` and the
    /// routing of all `Bt·C` segments.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, opts: &MoeOptions) -> Result<(Var, LayerRouting)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("Seg-MoE expects [Bt, M, {}]", self.d_model),
            });
        }
        let (bt, m, d) = (shape[0], shape[1], shape[2]);
        let (u, _) = segment_tokens(g, x, self.omega, opts.pad_fill)?;
        let s = g.shape(u)[0];

        let logits = g.matmul(u, p.var(self.router))?;
        let scores = g.softmax(logits, 1)?;
        let mut decision = RouteDecision::from_scores(g.value(scores).clone(), self.top_k, opts.frozen)?;
        let mask = g.constant(decision.selection_mask());
        let gates = g.mul(scores, mask)?;

        let mut acc: Option<Var> = None;
        if let Some(sh) = &self.shared {
            let gate = match opts.shared_gate {
                Some(v) => g.constant(Tensor::full(vec![s, 1], v)?),
                None => {
                    let z = g.matmul(u, p.var(sh.gate_w))?;
                    let z = g.add(z, p.var(sh.gate_b))?;
                    g.sigmoid(z)
                }
            };
            decision.shared_gate = Some(g.value(gate).data().to_vec());
            let y = sh.ffn.forward(g, p, u)?;
            acc = Some(g.mul(y, gate)?);
        }

        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..s).filter(|&r| decision.selected[r].contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            let ui = g.index_select(u, 0, &rows)?;
            let yi = expert.forward(g, p, ui)?;
            let gi = g.index_select(gates, 0, &rows)?;
            let gi = g.index_select(gi, 1, &[i])?;
            let yi = g.mul(yi, gi)?;
            let yi = g.scatter_add(yi, 0, &rows, s)?;
            acc = Some(match acc {
                Some(a) => g.add(a, yi)?,
                None => yi,
            });
        }
        let out = acc.expect("K >= 1 selects at least one expert");
        let out = unsegment_tokens(g, out, bt, m, d)?;
        Ok((out, LayerRouting { decision, scores }))
    }

    /// Every parameter id of this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.router];
        for e in &self.experts {
            ids.extend(e.ids());
        }
        if let Some(sh) = &self.shared {
            ids.extend(sh.ffn.ids());
            ids.push(sh.gate_w);
            ids.push(sh.gate_b);
        }
        ids
    }
}
