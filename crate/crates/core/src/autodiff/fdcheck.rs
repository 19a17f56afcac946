//! Central-difference gradient checking.

use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerical gradient of a scalar function by central differences.
pub fn central_difference(
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
    at: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(at.shape().to_vec(), out)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-6)`. The floor keeps entries
/// whose size is near the round-off of a central difference from reading
/// as large relative errors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-6)
}

/// Compares the tape gradient of `f` at `at` with central differences.
///
/// `f` builds a scalar from its input on the given tape. It is evaluated
/// twice at `at` first; differing results are reported as
/// [`Error::NonDeterministic`].
pub fn finite_difference_check<F>(f: F, at: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone())?;
        let y = f(&mut tape, v)?;
        tape.value(y).item().ok_or(Error::NonScalarRoot { numel: tape.value(y).len() })
    };
    let first = eval(at)?;
    let second = eval(at)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut tape = Tape::new();
    let x = tape.variable(at.clone())?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(x, at.shape());
    let numeric = central_difference(eval, at, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}
