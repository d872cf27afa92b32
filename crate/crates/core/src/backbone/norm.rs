use crate::error::Result;
use crate::tensor::{Graph, Var};

pub const RMS_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + ε) · gain` over the last axis, ε = [`RMS_EPS`].
pub fn rmsnorm(g: &mut Graph, x: Var, gain: Var) -> Result<Var> {
    rmsnorm_eps(g, x, gain, RMS_EPS)
}

pub fn rmsnorm_eps(g: &mut Graph, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let last = g.shape(x).len() - 1;
    let sq = g.mul(x, x)?;
    let ms = g.mean(sq, last, true)?;
    let ms = g.add_scalar(ms, eps);
    let den = g.sqrt(ms);
    let y = g.div(x, den)?;
    g.mul(y, gain)
}
