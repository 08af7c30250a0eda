//! Central finite-difference checks against [`Graph::backward`](crate::Graph::backward).

use crate::{Float, Tensor};

/// Outcome of comparing one analytic gradient with its numerical estimate.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|, floor)` seen.
    pub max_rel_err: f64,
    /// Flat index where `max_rel_err` occurred.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Relative error with a floor so that two near-zero gradients compare equal.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Numerical gradient of `f` at `x` for the flat indices in `indices`.
pub fn numeric_grad(
    x: &Tensor<f64>,
    indices: &[usize],
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Compares `analytic` (full gradient tensor) with central differences of `f`
/// on a subset of coordinates.
pub fn check_against<T: Float>(
    x: &Tensor<f64>,
    analytic: &Tensor<T>,
    indices: &[usize],
    eps: f64,
    floor: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "analytic gradient shape mismatch");
    let numeric = numeric_grad(x, indices, eps, f);
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (&i, &n) in indices.iter().zip(&numeric) {
        let a = analytic.data()[i].to_f64();
        let e = rel_error(a, n, floor);
        if e >= report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: e,
                worst_index: i,
                worst_analytic: a,
                worst_numeric: n,
                ..report
            };
        }
    }
    report
}

/// Evenly spread sample of at most `count` flat indices out of `numel`.
pub fn spread_indices(numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    let step = numel as f64 / count as f64;
    (0..count).map(|i| ((i as f64 + 0.5) * step) as usize).collect()
}
