//! Central-difference gradient checking in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Below this magnitude central differences at h = 1e-5 are dominated by
/// round-off in the loss value, so errors there are measured absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|analytic − numeric| / max(REL_ERROR_FLOOR, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, max_coords_per_tensor: None }
    }
}

fn coords(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Evaluates `f` on a fresh tape and returns its scalar value.
pub fn evaluate<F>(f: &F, theta: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|t| tape.param(t)).collect();
    let root = f(&tape, &vars)?;
    let value = tape.value(root).item()?;
    if !value.is_finite() {
        bail!(Numeric, "objective returned non-finite value {value}");
    }
    Ok(value)
}

/// Reverse-mode gradient of `f` at `theta`.
pub fn analytic_gradient<F>(f: &F, theta: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|t| tape.param(t)).collect();
    let root = f(&tape, &vars)?;
    let value = tape.value(root).item()?;
    if !value.is_finite() {
        bail!(Numeric, "objective returned non-finite value {value}");
    }
    let grads = tape.backward(root)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Central differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` at the selected
/// coordinates; unselected coordinates are left at zero.
pub fn numeric_gradient<F>(f: &F, theta: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(opts.h > 0.0) {
        bail!(Contract, "finite-difference step must be positive, got {}", opts.h);
    }
    let mut work: Vec<Tensor<f64>> = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for t in 0..work.len() {
        let mut g = vec![0.0; work[t].numel()];
        for i in coords(work[t].numel(), opts.max_coords_per_tensor) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + opts.h;
            let plus = evaluate(f, &work)?;
            work[t].data_mut()[i] = orig - opts.h;
            let minus = evaluate(f, &work)?;
            work[t].data_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * opts.h);
        }
        out.push(Tensor::new(work[t].shape(), g)?);
    }
    Ok(out)
}

/// Maximum relative error between two gradient sets over the selected coordinates.
pub fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], max_coords: Option<usize>) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0 };
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for i in coords(a.numel(), max_coords) {
            let e = relative_error(a.data()[i], n.data()[i]);
            report.coords_checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((t, i));
            }
        }
    }
    report
}

/// Compares the tape gradient of `f` with central differences at every coordinate.
pub fn grad_check<F>(f: F, theta: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, theta, &GradCheckOptions { h, max_coords_per_tensor: None })
}

pub fn grad_check_with<F>(f: F, theta: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, theta)?;
    let numeric = numeric_gradient(&f, theta, opts)?;
    Ok(compare(&analytic, &numeric, opts.max_coords_per_tensor))
}
