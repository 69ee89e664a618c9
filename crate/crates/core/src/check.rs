//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it shares nothing
//! with the backward rules it validates.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::Var;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked coordinates.
    pub rel_error: f64,
    pub coords: usize,
    pub analytic_norm: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Compare backprop against central differences for the scalar loss built by
/// `f` from `inputs` (graph leaves) and the parameters in `store`.
///
/// At most `max_coords` coordinates per tensor are probed, chosen by `rng`.
pub fn check_session<F, R>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    step: f64,
    max_coords: usize,
    rng: &mut R,
) -> GradCheck
where
    F: Fn(&mut Session<'_>, &[Var]) -> Var,
    R: Rng,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut s = Session::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| s.g.constant(t.clone())).collect();
        let loss = f(&mut s, &vars);
        s.g.value(loss).item()
    };

    let mut s = Session::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| s.g.leaf(t.clone())).collect();
    let loss = f(&mut s, &vars);
    let grads = s.g.backward(loss);
    let param_grads = s.param_grads(&grads);
    let input_grads: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    for (i, t) in inputs.iter().enumerate() {
        for c in pick(t.numel(), max_coords, rng) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= step;
            numeric.push((eval(store, &plus) - eval(store, &minus)) / (2.0 * step));
            analytic.push(input_grads[i].as_ref().map_or(0.0, |g| g.data()[c]));
        }
    }
    for id in store.ids() {
        let n = store.get(id).numel();
        for c in pick(n, max_coords, rng) {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[c] += step;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[c] -= step;
            numeric.push((eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * step));
            analytic.push(param_grads[id.index()].as_ref().map_or(0.0, |g| g.data()[c]));
        }
    }
    compare(&analytic, &numeric)
}

fn pick<R: Rng>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric)).max(1e-12);
    GradCheck {
        rel_error: norm(&diff) / scale,
        coords: analytic.len(),
        analytic_norm: norm(analytic),
    }
}
