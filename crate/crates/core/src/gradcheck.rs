//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Scalar;

/// Largest relative error found for each parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(8 (f(x + h) - f(x - h)) - (f(x + 2h) - f(x - 2h))) / 12h`, error `O(h^4)`.
    FivePoint,
}

/// Compares the tape gradient of `f` at `params` with
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every scalar entry.
///
/// `f` receives a fresh tape and the parameters bound on it and must return
/// a scalar node. It is evaluated twice at the unperturbed point first; any
/// disagreement is reported as [`Error::NonDeterministic`].
pub fn grad_check<T, F>(params: &ParamSet<T>, eps: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &BoundParams) -> Result<Var>,
{
    grad_check_with(params, eps, Stencil::ThreePoint, f)
}

/// [`grad_check`] with a choice of difference formula.
pub fn grad_check_with<T, F>(params: &ParamSet<T>, eps: f64, stencil: Stencil, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &BoundParams) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let eval = |p: &ParamSet<T>| -> Result<T> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let root = f(&mut tape, &bound)?;
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let root = f(&mut tape, &bound)?;
    let first = tape.value(root).item()?;
    tape.backward(root)?;
    let analytic = params.grads_from(&tape, &bound)?;

    let second = eval(params)?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(Error::NonDeterministic(format!("f evaluated to {first} and then {second}")));
    }

    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for (name, grad) in analytic.iter() {
        let mut worst: f64 = 0.0;
        for i in 0..grad.numel() {
            let orig = work.get(name)?.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(name)?.data_mut()[i] = orig + T::from_f64(offset);
                let v = eval(&work)?.as_f64();
                work.get_mut(name)?.data_mut()[i] = orig;
                Ok(v)
            };
            let near = at(eps)? - at(-eps)?;
            let numeric = match stencil {
                Stencil::ThreePoint => near / (2.0 * eps),
                Stencil::FivePoint => (8.0 * near - (at(2.0 * eps)? - at(-2.0 * eps)?)) / (12.0 * eps),
            };
            worst = worst.max(relative_error(grad.data()[i].as_f64(), numeric));
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param })
}
