//! Finite-difference oracle for gradient checks.
//!
//! Only forward evaluations are used here, so the estimate is independent of
//! every backward rule on the tape.

use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Relative error with a floor on the denominator so that gradients near
/// zero are compared absolutely at `floor · tol`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of a scalar function of one parameter entry.
pub fn central_difference<F>(store: &mut ParamStore, id: ParamId, index: usize, h: f64, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + h;
    let plus = f(store);
    store.get_mut(id).data_mut()[index] = orig - h;
    let minus = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Summary of a parameter-wide gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric, floor);
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
    }
}
