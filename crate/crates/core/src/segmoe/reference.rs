//! Plain-loop token-wise MoE used as an oracle for the `ω = 1` case.
//!
//! Each token is routed on its own: `s = softmax(x·W)`, the Top-K experts
//! keep their raw probability as gate, everything else is zero, and the
//! output is `Σ g_i · FFN_i(x)`. Arithmetic order mirrors the graph kernels
//! (sequential dot products from 0, bias added afterwards, experts summed
//! in ascending index) so results can be compared bit for bit.

use super::top_k;
use crate::tensor::{gelu, Tensor};

/// Weights of one expert: `w1 [d, d_ff]`, `b1 [d_ff]`, `w2 [d_ff, d]`,
/// `b2 [d]`.
#[derive(Clone, Debug)]
pub struct RefExpert {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    (0..n)
        .map(|j| {
            let mut s = 0.0;
            for (p, &xv) in x.iter().enumerate().take(k) {
                s += xv * wd[p * n + j];
            }
            match b {
                Some(b) => s + b.data()[j],
                None => s,
            }
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        max = max.max(v);
    }
    let mut e = Vec::with_capacity(x.len());
    let mut sum = 0.0;
    for &v in x {
        let t = (v - max).exp();
        e.push(t);
        sum += t;
    }
    e.iter().map(|v| v / sum).collect()
}

pub fn expert_forward(x: &[f64], e: &RefExpert) -> Vec<f64> {
    let h: Vec<f64> = affine(x, &e.w1, Some(&e.b1)).into_iter().map(gelu).collect();
    affine(&h, &e.w2, Some(&e.b2))
}

/// Routes and transforms every token independently. Returns outputs and the
/// selected experts per token.
pub fn token_moe(tokens: &[Vec<f64>], router: &Tensor, experts: &[RefExpert], k: usize) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut outs = Vec::with_capacity(tokens.len());
    let mut picks = Vec::with_capacity(tokens.len());
    for x in tokens {
        let s = softmax(&affine(x, router, None));
        let sel = top_k(&s, k);
        let mut ascending = sel.clone();
        ascending.sort_unstable();
        let mut out = vec![0.0; x.len()];
        for &i in &ascending {
            let y = expert_forward(x, &experts[i]);
            for (o, v) in out.iter_mut().zip(y) {
                *o += v * s[i];
            }
        }
        outs.push(out);
        picks.push(sel);
    }
    (outs, picks)
}
