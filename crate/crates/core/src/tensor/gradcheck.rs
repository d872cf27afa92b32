use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputGradReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Element with the largest error: (flat index, autodiff, finite difference).
    pub worst: (usize, f64, f64),
    /// Elements whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub inputs: Vec<InputGradReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.flagged.is_empty())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, for every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with(
        f,
        inputs,
        &GradCheckOptions {
            step,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

pub fn check_gradients_with<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perturbed = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut report = InputGradReport {
            input: i,
            checked: elements.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
            flagged: Vec::new(),
        };
        for &e in &elements {
            let orig = input.data()[e];
            perturbed[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&f, &perturbed)?;
            let fp = plus.0.value(plus.2).item()?;
            perturbed[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&f, &perturbed)?;
            let fm = minus.0.value(minus.2).item()?;
            perturbed[i].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[i][e];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (e, a, numeric);
            }
            if err > opts.tol || !err.is_finite() {
                report.flagged.push(e);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        inputs: reports,
    })
}
