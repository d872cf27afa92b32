//! Training objective and evaluation metrics.

use crate::error::{Error, Result};
use crate::segmoe::{routing_stats, LayerRouting};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_DELTA: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 0.02;

/// Huber loss of one error.
pub fn huber_value(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Mean Huber loss, written as `0.5·q² + δ·(|e| − q)` with `q = min(|e|, δ)`
/// so one expression covers both branches.
pub fn huber(g: &mut Graph, pred: Var, target: Var, delta: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Shape {
            op: "huber",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    if !(delta > 0.0) {
        return Err(Error::config("delta", "must be positive"));
    }
    let e = g.sub(pred, target)?;
    let a = g.abs(e);
    let q = g.clamp_max(a, delta);
    let q2 = g.mul(q, q)?;
    let quad = g.scale(q2, 0.5);
    let lin = g.sub(a, q)?;
    let lin = g.scale(lin, delta);
    let l = g.add(quad, lin)?;
    Ok(g.mean_all(l))
}

/// `N · Σ f_i r_i`.
pub fn aux_balance_loss(f: &[f64], r: &[f64]) -> Result<f64> {
    if f.len() != r.len() || f.is_empty() {
        return Err(Error::Invalid(format!(
            "balance loss needs equal-length f and r (got {} and {})",
            f.len(),
            r.len()
        )));
    }
    if f.iter().chain(r).any(|&v| !(v >= 0.0)) {
        return Err(Error::Invalid("balance loss inputs must be non-negative".into()));
    }
    for (name, v) in [("f", f), ("r", r)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("{name} sums to {s}, expected 1")));
        }
    }
    Ok(f.len() as f64 * f.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
}

/// Balance loss of one layer as a graph node. `f` enters as a constant; the
/// gradient reaches the router through `r_i = mean_c s_{i,c}`.
pub fn aux_loss_node(g: &mut Graph, scores: Var, f: &[f64]) -> Result<Var> {
    let n = g.shape(scores)[1];
    if f.len() != n {
        return Err(Error::Shape {
            op: "aux_loss",
            lhs: g.shape(scores).to_vec(),
            rhs: vec![f.len()],
        });
    }
    let r = g.mean(scores, 0, false)?;
    let fv = g.constant(Tensor::new(vec![n], f.to_vec())?);
    let fr = g.mul(fv, r)?;
    let s = g.sum_all(fr);
    Ok(g.scale(s, n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub pred: f64,
    /// Balance loss per Seg-MoE layer.
    pub aux: Vec<f64>,
    pub aux_mean: f64,
    pub total: f64,
    pub alpha: f64,
    pub delta: f64,
}

/// `Huber(pred, target) + α · mean_layers(L_aux)`.
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    routing: &[LayerRouting],
    alpha: f64,
    delta: f64,
) -> Result<(Var, LossReport)> {
    if routing.is_empty() {
        return Err(Error::Invalid("total loss needs routing statistics for every layer".into()));
    }
    let lp = huber(g, pred, target, delta)?;
    let mut aux_nodes = Vec::with_capacity(routing.len());
    for layer in routing {
        let stats = routing_stats(&[&layer.decision])?;
        aux_nodes.push(aux_loss_node(g, layer.scores, &stats.f)?);
    }
    let aux: Vec<f64> = aux_nodes.iter().map(|&v| g.value(v).data()[0]).collect();
    let mut sum = aux_nodes[0];
    for &v in &aux_nodes[1..] {
        sum = g.add(sum, v)?;
    }
    let mean = g.scale(sum, 1.0 / aux_nodes.len() as f64);
    let weighted = g.scale(mean, alpha);
    let total = g.add(lp, weighted)?;
    let report = LossReport {
        pred: g.value(lp).data()[0],
        aux_mean: g.value(mean).data()[0],
        aux,
        total: g.value(total).data()[0],
        alpha,
        delta,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {report:?}")));
    }
    Ok((total, report))
}

/// Mean squared and mean absolute error of two equal-length series.
pub fn mse_mae(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse_mae",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        se += (t - p) * (t - p);
        ae += (t - p).abs();
    }
    Ok((se / n, ae / n))
}
