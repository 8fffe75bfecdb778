//! Central finite-difference gradient checking.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, element index, analytic, numeric)` beyond tolerance.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error `|a - n| / max(|a|, |n|)`; differences below `abs_floor`
/// count as zero error.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= abs_floor {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs())
}

/// Compares `analytic` (one tensor per entry of `store`) against
/// `(loss(p + h) - loss(p - h)) / 2h` for every element of the tensors in
/// `ids`. `loss` must be a pure function of the store.
pub fn check(
    store: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    ids: &[ParamId],
    step: f64,
    tolerance: f64,
    abs_floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &id in ids {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let plus = loss(store);
            store.get_mut(id).data_mut()[k] = orig - step;
            let minus = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.0].data()[k];
            let e = rel_err(a, numeric, abs_floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(e);
            if e > tolerance {
                report.failures.push((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    report
}
