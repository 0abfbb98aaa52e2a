//! Central-difference gradient checking against the tape's analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::numeric("function value is not finite"));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::numeric("function value is not finite"));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut xs = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..xs.len() {
        for k in 0..xs[t].len() {
            let orig = xs[t].data()[k];
            xs[t].data_mut()[k] = orig + step;
            let plus = eval(&xs)?;
            xs[t].data_mut()[k] = orig - step;
            let minus = eval(&xs)?;
            xs[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[t].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
