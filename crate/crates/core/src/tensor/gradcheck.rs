//! Central finite-difference oracle for tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
///
/// The relative error of entry `i` is `|a_i - n_i| / max(|a_i|, |n_i|, s)`
/// where `s` is 1% of the largest numeric gradient magnitude, so entries
/// that are tiny compared with the rest of the gradient are judged on the
/// gradient's own scale instead of their (noise-dominated) magnitude.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = f(&mut tape, v)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(y)
        )));
    }
    Ok(tape.value(y)[0].as_f64())
}

fn analytic<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.variable(x);
    let y = f(&mut tape, v)?;
    tape.backward(y)?;
    Ok(match tape.grad(v) {
        Some(g) => g.iter().map(|g| g.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    })
}

fn numeric<U: Scalar, F>(f: &F, x: &Tensor<U>, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<U>, Var) -> Result<Var>,
{
    let first = eval(f, x)?;
    let second = eval(f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(
            "function under grad_check is not deterministic".into(),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + U::from_f64_lossy(eps);
        let plus = eval(f, &probe)?;
        probe.data_mut()[i] = orig - U::from_f64_lossy(eps);
        let minus = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

fn compare(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(f64::MIN_POSITIVE);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = if abs == 0.0 {
            0.0
        } else {
            abs / a.abs().max(n.abs()).max(floor)
        };
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
        tol,
        passed: max_rel < tol,
        analytic,
        numeric,
    }
}

/// Checks tape gradients of scalar `f` at `x` against central differences
/// computed in the same precision.
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let a = analytic(&f, x)?;
    let n = numeric(&f, x, eps)?;
    Ok(compare(a, n, tol))
}

/// Checks tape gradients computed in precision `T` against central
/// differences of the same function evaluated in precision `U`.
///
/// With `T = f32, U = f64` this validates the float32 engine without the
/// cancellation noise of float32 finite differences.
pub fn grad_check_mixed<T, U, F, G>(
    f_lo: F,
    f_hi: G,
    x: &Tensor<T>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    U: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
    G: Fn(&mut Tape<U>, Var) -> Result<Var>,
{
    let a = analytic(&f_lo, x)?;
    let n = numeric(&f_hi, &x.cast::<U>(), eps)?;
    Ok(compare(a, n, tol))
}
