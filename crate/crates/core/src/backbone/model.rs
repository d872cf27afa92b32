use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dropout, rmsnorm, EncoderBlock, ForwardCtx, HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ones, xavier_uniform, zeros, Bound, ParamId, ParamStore};
use crate::segmoe::{LayerRouting, MoeOptions};
use crate::tensor::{Graph, Tensor, Var};

/// Per-call overrides applied to every Seg-MoE layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Expert choice per layer and segment.
    pub frozen: Option<&'a [Vec<Vec<usize>>]>,
    pub shared_gate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[Bt, H_o]` on the instance-normalized scale.
    pub pred: Var,
    /// One entry per block.
    pub routing: Vec<LayerRouting>,
}

/// The full forecaster: patch embedding, `B` encoder blocks, final norm and
/// a linear head.
#[derive(Clone, Debug)]
pub struct SegMoeModel {
    config: ModelConfig,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<EncoderBlock>,
    final_norm: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl SegMoeModel {
    /// Validates `config` and initializes all weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let omegas = config.omega_schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed_w = store.add("embed.weight", xavier_uniform(&mut rng, config.patch_len, d));
        let embed_b = store.add("embed.bias", zeros(&[d]));
        let blocks = omegas
            .iter()
            .enumerate()
            .map(|(b, &w)| EncoderBlock::init(&mut store, &config, b, w, &mut rng))
            .collect();
        let final_norm = store.add("final_norm.gain", ones(&[d]));
        let head_in = match config.head {
            HeadKind::Flatten => config.tokens() * d,
            HeadKind::LastToken => d,
        };
        let head_w = store.add("head.weight", xavier_uniform(&mut rng, head_in, config.h_out));
        let head_b = store.add("head.bias", zeros(&[config.h_out]));
        Ok(SegMoeModel {
            config,
            store,
            embed_w,
            embed_b,
            blocks,
            final_norm,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn embed_ids(&self) -> (ParamId, ParamId) {
        (self.embed_w, self.embed_b)
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn final_norm_id(&self) -> ParamId {
        self.final_norm
    }

    /// `[Bt, L]` windows → `[Bt, M, P]` patches, zero-padding the tail.
    pub fn patch_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        let (l, pl) = (self.config.lookback, self.config.patch_len);
        if inputs.rank() != 2 || inputs.shape()[1] != l {
            return Err(Error::InvalidShape {
                shape: inputs.shape().to_vec(),
                reason: format!("model expects [batch, {l}] windows"),
            });
        }
        let (bt, m) = (inputs.shape()[0], self.config.tokens());
        let mut data = vec![0.0; bt * m * pl];
        for b in 0..bt {
            data[b * m * pl..b * m * pl + l].copy_from_slice(inputs.row(b));
        }
        Tensor::new(vec![bt, m, pl], data)
    }

    /// Embeds patches `[Bt, M, P]` to tokens `[Bt, M, d]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Var> {
        if g.shape(patches).last() != Some(&self.config.patch_len) {
            return Err(Error::Shape {
                op: "embed_patches",
                lhs: g.shape(patches).to_vec(),
                rhs: vec![self.config.patch_len, self.config.d_model],
            });
        }
        let z = g.matmul(patches, p.var(self.embed_w))?;
        g.add(z, p.var(self.embed_b))
    }

    /// Final norm and linear head: `[Bt, M, d]` → `[Bt, H_o]`.
    pub fn head(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let (bt, m, d) = (g.shape(tokens)[0], g.shape(tokens)[1], g.shape(tokens)[2]);
        let n = rmsnorm(g, tokens, p.var(self.final_norm))?;
        let flat = match self.config.head {
            HeadKind::Flatten => g.reshape(n, &[bt, m * d])?,
            HeadKind::LastToken => {
                let last = g.narrow(n, 1, m - 1, 1)?;
                g.reshape(last, &[bt, d])?
            }
        };
        let y = g.matmul(flat, p.var(self.head_w))?;
        g.add(y, p.var(self.head_b))
    }

    /// Forward pass on instance-normalized windows `[Bt, L]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &Tensor,
        ctx: &mut ForwardCtx,
        opts: &ForwardOptions,
    ) -> Result<ModelOutput> {
        if let Some(f) = opts.frozen {
            if f.len() != self.blocks.len() {
                return Err(Error::Invalid(format!(
                    "frozen routing covers {} layers, model has {}",
                    f.len(),
                    self.blocks.len()
                )));
            }
        }
        let patches = g.constant(self.patch_batch(inputs)?);
        let z = self.embed(g, p, patches)?;
        let mut x = dropout(g, z, self.config.dropout, ctx)?;
        let mut routing = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let moe = MoeOptions {
                frozen: opts.frozen.map(|f| f[b].as_slice()),
                shared_gate: opts.shared_gate,
                pad_fill: None,
            };
            let (y, r) = block.forward(g, p, x, None, ctx, &moe)?;
            x = y;
            routing.push(r);
        }
        let pred = self.head(g, p, x)?;
        Ok(ModelOutput { pred, routing })
    }

    /// Evaluation-mode prediction `[Bt, L]` → `[Bt, H_o]`.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let out = self.forward(&mut g, &p, inputs, &mut ForwardCtx::eval(), &ForwardOptions::default())?;
        Ok(g.value(out.pred).clone())
    }
}
