use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used by the gradient checks throughout the crate.
pub const FD_EPSILON: f64 = 1e-5;
/// Largest accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

fn loss_value<F>(params: &ParamSet<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("loss has shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares `analytic` with central differences of the loss built by
/// `build`, perturbing every coordinate of `param`. Returns
/// `max |analytic − numeric| / max(1, |numeric|)`.
pub fn compare_gradient<F>(analytic: &Tensor<f64>, params: &ParamSet<f64>, param: ParamId, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    if analytic.shape() != params.get(param).shape() {
        return Err(Error::dim("compare_gradient", analytic.shape(), params.get(param).shape()));
    }
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for k in 0..analytic.len() {
        let original = work.get(param)[k];
        work.get_mut(param).data_mut()[k] = original + eps;
        let up = loss_value(&work, &build)?;
        work.get_mut(param).data_mut()[k] = original - eps;
        let down = loss_value(&work, &build)?;
        work.get_mut(param).data_mut()[k] = original;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Backpropagates through the loss built by `build` and checks the
/// gradient of `param` against central differences.
pub fn finite_diff_check<F>(params: &ParamSet<f64>, param: ParamId, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss, params)?;
    let analytic = grads
        .get(param)
        .ok_or_else(|| Error::Contract(format!("{} is not trainable", params.name(param))))?;
    compare_gradient(analytic, params, param, eps, build)
}

/// [`finite_diff_check`] for every trainable parameter, in id order.
pub fn check_all<F>(params: &ParamSet<f64>, eps: f64, build: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss, params)?;
    grads
        .iter()
        .map(|(id, analytic)| {
            let err = compare_gradient(analytic, params, id, eps, &build)?;
            Ok((params.name(id).to_string(), err))
        })
        .collect()
}
