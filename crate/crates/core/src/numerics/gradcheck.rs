//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::ParamStore;

/// Below this magnitude (for both values) the absolute difference is reported.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

/// Where the worst disagreement was found.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Error between one analytic and one numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Compares every entry of `params.grad` with `(f(θ+eps) − f(θ−eps)) / (2·eps)`.
///
/// The analytic gradients must already be stored in the parameters. Values are
/// restored exactly after each probe. `loss_fn` is evaluated twice at the
/// starting point and must return bitwise identical results.
pub fn grad_check(loss_fn: impl Fn(&ParamStore) -> f64, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let n_params = params.len();
    for p in 0..n_params {
        let len = params.iter().nth(p).map_or(0, |x| x.value.as_slice().len());
        for k in 0..len {
            let param = params.iter_mut().nth(p).expect("index in range");
            let original = param.value.as_slice()[k];
            let analytic = param.grad.as_slice()[k];

            param.value.as_mut_slice()[k] = original + eps;
            let plus = loss_fn(params);
            params.iter_mut().nth(p).expect("index").value.as_mut_slice()[k] = original - eps;
            let minus = loss_fn(params);
            let param = params.iter_mut().nth(p).expect("index");
            param.value.as_mut_slice()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst_param = param.name.clone();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
