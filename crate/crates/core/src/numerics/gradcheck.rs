use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_k |analytic_k − numeric_k| / max(1e-8, |analytic_k| + |numeric_k|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum, if any coordinate was checked.
    pub worst_index: Option<usize>,
    pub numeric: Vec<f64>,
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `f` is evaluated at `params ± eps·e_k` for every coordinate `k`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::NonFinite(format!("finite-difference step {eps}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = None;
    for k in 0..params.len() {
        probe[k] = params[k] + eps;
        let plus = f(&probe)?;
        probe[k] = params[k] - eps;
        let minus = f(&probe)?;
        probe[k] = params[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {k}")));
        }
        let n = (plus - minus) / (2.0 * eps);
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("difference quotient at coordinate {k}")));
        }
        let a = analytic[k];
        let rel = libm::fabs(a - n) / f64::max(1e-8, libm::fabs(a) + libm::fabs(n));
        if worst_index.is_none() || rel > max_rel_error {
            max_rel_error = rel;
            worst_index = Some(k);
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        numeric,
    })
}
