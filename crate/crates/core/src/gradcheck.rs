//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Faults, Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar output from the recorded inputs.
pub trait ScalarFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> ScalarFn for F {}

/// Outcome of a gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate(f: &impl ScalarFn, inputs: &[Tensor], faults: Faults) -> Result<f64> {
    let mut tape = Tape::with_faults(faults);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("gradcheck function output has shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares analytic gradients of `f` against central differences over
/// every coordinate of every input, returning the worst relative error.
pub fn grad_check_many(f: impl ScalarFn, inputs: &[Tensor], eps: f64) -> Result<GradCheck> {
    grad_check_with_faults(f, inputs, eps, Faults::default())
}

#[doc(hidden)]
pub fn grad_check_with_faults(f: impl ScalarFn, inputs: &[Tensor], eps: f64, faults: Faults) -> Result<GradCheck> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Range(format!("gradcheck step {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::with_faults(faults);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract(format!(
            "gradcheck function output has shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).clone();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = evaluate(&f, &probe, faults)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = evaluate(&f, &probe, faults)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        coordinates,
    })
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<f64> {
    let r = grad_check_many(move |t: &mut Tape, v: &[Var]| f(t, v[0]), std::slice::from_ref(x), eps)?;
    Ok(r.max_rel_err)
}
