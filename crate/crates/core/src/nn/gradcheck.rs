//! Central-difference verification of reverse-mode gradients.

use crate::error::{Result, SonarError};
use crate::nn::{ParamStore, Tensor2};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that coordinates with vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients returned by `f` with central differences
/// `(f(x + eps) - f(x - eps)) / 2eps` for every scalar in `store`.
///
/// `f` returns the scalar loss and one gradient buffer per parameter, in
/// store order.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<Tensor2>)>,
{
    if !(eps > 0.0) {
        return Err(SonarError::InvalidConfig(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let (value, analytic) = f(store)?;
    if !value.is_finite() {
        return Err(SonarError::Numeric(format!("forward value {value}")));
    }
    if analytic.len() != store.len() {
        return Err(SonarError::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).as_slice()[i];
            probe.get_mut(id).as_mut_slice()[i] = orig + eps;
            let plus = f(&probe)?.0;
            probe.get_mut(id).as_mut_slice()[i] = orig - eps;
            let minus = f(&probe)?.0;
            probe.get_mut(id).as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(SonarError::Numeric(format!(
                    "non-finite forward value perturbing {}[{i}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[id.index()].as_slice()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
