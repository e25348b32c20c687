//! Central finite-difference checks for tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Same as [`finite_difference_check`], perturbing every coordinate of every input.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe[t].data()[i];
            let (hi, lo) = (orig + step, orig - step);
            probe[t].data_mut()[i] = hi;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = lo;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[i] = orig;
            // divide by the representable step, not the nominal one
            let numeric = (plus - minus) / (hi - lo);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out) {
        [v] => Ok(*v),
        other => Err(Error::Contract(format!(
            "finite-difference check needs a scalar function, got {} values",
            other.len()
        ))),
    }
}
