//! Central finite-difference verification of tape gradients.

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
    /// Failing elements whose one-sided differences disagree by more than
    /// the analytic/numeric gap: a kink lies within `h` of the point.
    pub kinked: Vec<usize>,
}

impl GradCheckReport {
    /// Failed only at elements where the function is not smooth within `h`.
    pub fn failed_at_kinks_only(&self) -> bool {
        !self.passed && {
            let failing = self
                .analytic
                .iter()
                .zip(&self.numeric)
                .filter(|(&a, &n)| relative_error(a, n) >= self.tol)
                .count();
            failing == self.kinked.len()
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<T, F>(f: &mut F, point: &Tensor<T>) -> Result<f64>
where
    T: Scalar,
    F: for<'t> FnMut(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&tape, x)?;
    let v = y.value();
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.data()[0].as_f64())
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences `(f(x + h) - f(x - h)) / 2h`, element by element.
pub fn grad_check<T, F>(mut f: F, point: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> FnMut(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("grad_check: step {h} must be positive")));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let y = f(&tape, x)?;
        tape.backward(y)?;
        tape.grad_or_zero(x).data().iter().map(|v| v.as_f64()).collect::<Vec<_>>()
    };
    let f0 = eval_scalar(&mut f, point)?;
    let mut numeric = Vec::with_capacity(point.numel());
    let mut one_sided = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::lit(orig.as_f64() + h);
        let fp = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = T::lit(orig.as_f64() - h);
        let fm = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
        one_sided.push(((fp - f0) / h, (f0 - fm) / h));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        analytic,
        numeric,
        tol,
        passed: true,
        kinked: Vec::new(),
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let rel = relative_error(a, n);
        let (fwd, bwd) = one_sided[i];
        if rel >= tol && (fwd - bwd).abs() > (a - n).abs() {
            report.kinked.push(i);
        }
        report.max_abs_err = report.max_abs_err.max((a - n).abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
