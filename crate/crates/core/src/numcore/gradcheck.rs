//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`Graph::backward`](super::Graph::backward).

use super::params::{Gradients, ParamStore};
use crate::scalar::Scalar;

/// Numeric gradient of `loss` with respect to every parameter value, by
/// central differences with step `h`. Only forward evaluations are used.
pub fn numeric_gradient<T: Scalar>(
    store: &mut ParamStore<T>,
    h: f64,
    mut loss: impl FnMut(&ParamStore<T>) -> f64,
) -> Gradients<T> {
    let mut out = Gradients::zeros_like(store);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + T::of(h);
            let plus = loss(store);
            store.get_mut(id).data_mut()[j] = orig - T::of(h);
            let minus = loss(store);
            store.get_mut(id).data_mut()[j] = orig;
            out.get_mut(id).data_mut()[j] = T::of((plus - minus) / (2.0 * h));
        }
    }
    out
}

/// Worst disagreement between two gradient sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub values_checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` maximised over all
/// values. `floor` keeps gradients that are zero up to round-off from
/// dominating the ratio.
pub fn compare<T: Scalar>(
    store: &ParamStore<T>,
    analytic: &Gradients<T>,
    numeric: &Gradients<T>,
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        values_checked: 0,
    };
    for id in store.ids() {
        for (j, (a, n)) in analytic
            .get(id)
            .data()
            .iter()
            .zip(numeric.get(id).data())
            .enumerate()
        {
            let (a, n) = (a.as_f64(), n.as_f64());
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(floor);
            report.values_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    report
}
