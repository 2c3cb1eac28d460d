//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the reverse pass it verifies.

use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative error `|a − n| / max(|a|, |n|)`; pairs whose absolute difference
/// is below `abs_floor` count as exact (both sides are round-off sized).
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compares `analytic(id)` against central differences of `loss` for every
/// trainable scalar in `store`.
pub fn check_gradients(
    store: &ParamStore<f64>,
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
    analytic: impl Fn(ParamId) -> Vec<f64>,
    step: f64,
    tolerance: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let grads = analytic(id);
        for (i, &analytic_i) in grads.iter().enumerate().take(store.get(id).numel()) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(analytic_i, numeric, abs_floor);
            report.checked += 1;
            report.worst_relative = report.worst_relative.max(rel);
            if rel > tolerance {
                report.mismatches.push(GradMismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: analytic_i,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
