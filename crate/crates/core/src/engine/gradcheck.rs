//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// `max |a - n| / max(|a|_inf, |n|_inf, 1e-8)` between two gradient tensors.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Compares the analytic gradient of `f` at `inputs` with central differences.
///
/// `f` builds a scalar from the supplied leaf variables; it is called once
/// for the analytic pass and twice per perturbed coordinate.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let grads = g.backward(out)?;

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for idx in 0..inputs[k].numel() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            numeric.data_mut()[idx] = (plus - minus) / (2.0 * step);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_input,
    })
}
