//! Encoder-only patch transformer with Seg-MoE feed-forward layers.

mod attention;
mod block;
mod config;
mod model;
mod norm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub use attention::{attention_dense, attention_tiled, Attention};
pub use block::EncoderBlock;
pub use config::{HeadKind, ModelConfig};
pub use model::{ForwardOptions, ModelOutput, SegMoeModel};
pub use norm::{rmsnorm, rmsnorm_eps, RMS_EPS};

/// Train/eval switch plus the random stream used by Dropout and DropPath.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub train: bool,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    /// Evaluation mode: Dropout and DropPath are the identity.
    pub fn eval() -> Self {
        ForwardCtx { train: false, rng: None }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(0))
    }
}

/// Inverted dropout: kept elements are scaled by `1/(1-p)`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if !ctx.train || p <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let scale = 1.0 / (1.0 - p);
    let rng = ctx.rng();
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Stochastic depth on a residual branch `[Bt, ..]`: each sample's branch is
/// dropped with probability `p` and rescaled by `1/(1-p)` otherwise.
pub fn drop_path(g: &mut Graph, x: Var, p: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if !ctx.train || p <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let keep = 1.0 - p;
    let rng = ctx.rng();
    let mask: Vec<f64> = (0..shape[0])
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mut mshape = vec![1; shape.len()];
    mshape[0] = shape[0];
    let m = g.constant(Tensor::new(mshape, mask)?);
    g.mul(x, m)
}

/// Drop probability of block `b` out of `blocks`: grows linearly from 0 at
/// the first block to `p_max` at the last.
pub fn droppath_rate(b: usize, blocks: usize, p_max: f64) -> f64 {
    if blocks <= 1 {
        0.0
    } else {
        b as f64 / (blocks - 1) as f64 * p_max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_mode_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![4, 3], 2.0).unwrap());
        let mut ctx = ForwardCtx::eval();
        assert_eq!(dropout(&mut g, x, 0.5, &mut ctx).unwrap(), x);
        assert_eq!(drop_path(&mut g, x, 0.5, &mut ctx).unwrap(), x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![200, 100], 1.0).unwrap());
        let mut ctx = ForwardCtx::train(3);
        let y = dropout(&mut g, x, 0.2, &mut ctx).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 20_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 1.25));
    }

    #[test]
    fn drop_path_is_per_sample() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![64, 3, 2], 1.0).unwrap());
        let mut ctx = ForwardCtx::train(1);
        let y = drop_path(&mut g, x, 0.3, &mut ctx).unwrap();
        for s in 0..64 {
            let chunk = &g.value(y).data()[s * 6..(s + 1) * 6];
            assert!(chunk.iter().all(|&v| v == chunk[0]));
        }
    }

    #[test]
    fn survival_schedule() {
        assert_eq!(droppath_rate(0, 4, 0.3), 0.0);
        assert!((droppath_rate(3, 4, 0.3) - 0.3).abs() < 1e-15);
        assert!((droppath_rate(1, 4, 0.3) - 0.1).abs() < 1e-15);
        assert_eq!(droppath_rate(0, 1, 0.3), 0.0);
    }
}
