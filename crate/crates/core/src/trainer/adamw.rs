use super::TrainConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW state: first and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Applied (non-skipped) steps.
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; nothing changed.
    Skipped,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let z: Vec<Tensor> = store.iter().map(|(_, _, t)| t.map(|_| 0.0)).collect();
        AdamW {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    /// Decoupled decay `θ -= lr·wd·θ`, then the bias-corrected Adam update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) -> StepOutcome {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            log::warn!("non-finite gradient at step {}; update skipped", self.t + 1);
            return StepOutcome::Skipped;
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let g = grads[i][j];
                p[j] -= lr * cfg.weight_decay * p[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        StepOutcome::Applied
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
