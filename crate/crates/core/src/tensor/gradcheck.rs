use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape's gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, step, &coords)
}

/// [`finite_diff_check`] restricted to a subset of flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    Ok(finite_diff_report(f, x, step, coords)?.max_error)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// Worst relative error over the checked coordinates.
    pub max_error: f64,
    /// Coordinates whose `±step` perturbation changes a ReLU, max or clamp
    /// branch (see [`Tape::branch_signature`]). Central differences across
    /// such a kink do not estimate the derivative.
    pub branch_changes: Vec<usize>,
}

/// [`finite_diff_check_coords`] that also records which coordinates cross a
/// non-smooth point of `f` within the step.
pub fn finite_diff_report<F>(f: F, x: &Tensor<f64>, step: f64, coords: &[usize]) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite difference step must be positive, got {step}")));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(Error::Contract(format!("coordinate {c} outside an input of {}", x.len())));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape.grad(input).expect("param leaf has a gradient").to_vec();
    let base = tape.branch_signature();

    let eval = |data: Vec<f64>| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, input)?;
        Ok((tape.value(out).item()?, tape.branch_signature() != base))
    };

    let mut report = FiniteDiffReport {
        max_error: 0.0,
        branch_changes: Vec::new(),
    };
    for &i in coords {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += step;
        minus[i] -= step;
        let (up, up_changed) = eval(plus)?;
        let (down, down_changed) = eval(minus)?;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        report.max_error = report.max_error.max(err);
        if up_changed || down_changed {
            report.branch_changes.push(i);
        }
    }
    Ok(report)
}
