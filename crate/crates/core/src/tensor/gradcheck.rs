use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / (|numeric| + 1e-12)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let value = tape.value(y);
    if value.numel() != 1 {
        return Err(Error::Parameter(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    if !value.item().is_finite() {
        return Err(Error::Numeric(format!("f(x) = {}", value.item())));
    }
    let analytic = tape.backward(y)?.get_or_zeros(xv, x.shape());

    let eval = |probe: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), probe)?);
        let out = t.value(f(&t, v)?).item();
        if !out.is_finite() {
            return Err(Error::Numeric(format!("f(x +- eps) = {out}")));
        }
        Ok(out)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::Numeric(format!("analytic gradient {a} at {i}")));
        }
        worst = worst.max((a - numeric).abs() / (numeric.abs() + 1e-12));
    }
    Ok(worst)
}
