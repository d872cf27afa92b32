use super::SegBatch;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Routing outcome for `S` segments over `N` experts.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteDecision {
    /// `[S, N]` softmax probabilities.
    pub scores: Tensor,
    /// Per segment, the chosen experts in descending score order.
    pub selected: Vec<Vec<usize>>,
    /// `[S, N]`: the score where selected, zero elsewhere.
    pub gates: Tensor,
    /// Sigmoid gate of the shared expert per segment, when present.
    pub shared_gate: Option<Vec<f64>>,
    pub top_k: usize,
}

impl RouteDecision {
    pub fn segments(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn experts(&self) -> usize {
        self.scores.shape()[1]
    }

    /// Number of segments sent to each expert.
    pub fn usage_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.experts()];
        for sel in &self.selected {
            for &i in sel {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Builds the decision from scores, selecting Top-K or using `frozen`.
    pub(crate) fn from_scores(scores: Tensor, k: usize, frozen: Option<&[Vec<usize>]>) -> Result<Self> {
        let (s, n) = (scores.shape()[0], scores.shape()[1]);
        if k == 0 || k > n {
            return Err(Error::config("top_k", format!("K = {k} must lie in 1..={n}")));
        }
        let selected: Vec<Vec<usize>> = match frozen {
            Some(f) => {
                if f.len() != s || f.iter().any(|sel| sel.len() != k || sel.iter().any(|&i| i >= n)) {
                    return Err(Error::Invalid(format!(
                        "frozen routing must list {k} experts (< {n}) for each of {s} segments"
                    )));
                }
                f.to_vec()
            }
            None => (0..s).map(|r| top_k(scores.row(r), k)).collect(),
        };
        let mut gates = vec![0.0; s * n];
        for (r, sel) in selected.iter().enumerate() {
            for &i in sel {
                gates[r * n + i] = scores.data()[r * n + i];
            }
        }
        Ok(RouteDecision {
            gates: Tensor::new(vec![s, n], gates)?,
            scores,
            selected,
            shared_gate: None,
            top_k: k,
        })
    }

    /// `[S, N]` 0/1 selection mask.
    pub(crate) fn selection_mask(&self) -> Tensor {
        let n = self.experts();
        let mut m = vec![0.0; self.segments() * n];
        for (r, sel) in self.selected.iter().enumerate() {
            for &i in sel {
                m[r * n + i] = 1.0;
            }
        }
        Tensor::new(vec![self.segments(), n], m).expect("non-empty routing")
    }
}

/// Indices of the `k` largest entries, largest first; equal scores keep the
/// lower index first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routes each flattened segment with router weights `[ω·d, N]`.
pub fn route(seg: &SegBatch, router: &Tensor, k: usize) -> Result<RouteDecision> {
    let (c, w, d) = (seg.data.shape()[0], seg.data.shape()[1], seg.data.shape()[2]);
    if router.rank() != 2 || router.shape()[0] != w * d {
        return Err(Error::Shape {
            op: "route",
            lhs: vec![c, w * d],
            rhs: router.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let u = g.constant(seg.data.clone().reshape(vec![c, w * d])?);
    let wr = g.constant(router.clone());
    let logits = g.matmul(u, wr)?;
    let s = g.softmax(logits, 1)?;
    RouteDecision::from_scores(g.value(s).clone(), k, None)
}
