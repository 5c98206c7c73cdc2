//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest error per parameter, in the order the parameters were given.
    pub per_param: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares analytic gradients of the scalar function `f` with central
/// differences of step `h`.
///
/// The error for one coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`:
/// relative for large gradients, absolute near zero.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    grad_check_with(&(), |tape, _, vars| f(tape, vars), params, h, tol)
}

/// [`grad_check`] for functions that borrow from `ctx` for the lifetime of
/// each tape, such as a [`crate::nn::Binder`] over a parameter store.
pub fn grad_check_with<C, S, F>(ctx: &C, f: F, params: &[Tensor<S>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    C: ?Sized,
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &'t C, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let eval = |ps: &[Tensor<S>]| -> Result<S> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, S>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, ctx, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_, S>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, ctx, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let step = S::lit(h);
    let mut per_param = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (pi, a) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..params[pi].numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = ((fp - fm) / (S::lit(2.0) * step)).as_f64();
            let an = a.data()[k].as_f64();
            let err = (an - numeric).abs() / 1f64.max(an.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        per_param.push(worst);
    }
    let max_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, max_error, tol, passed: max_error <= tol })
}
