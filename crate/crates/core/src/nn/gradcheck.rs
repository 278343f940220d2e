use super::params::{Grads, ParamStore};

/// Worst coordinate found by [`finite_diff_gradcheck`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Every probed coordinate, in parameter order.
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

impl GradCheckReport {
    /// Largest relative error among coordinates where `|a| + |n| > floor`, and
    /// largest absolute difference among the rest. Useful when some gradients
    /// are exactly zero and central differences only see rounding noise.
    pub fn split_at_floor(&self, floor: f64) -> (f64, f64) {
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        for e in &self.entries {
            if e.analytic.abs() + e.numeric.abs() > floor {
                rel = rel.max(e.relative_error);
            } else {
                abs = abs.max((e.analytic - e.numeric).abs());
            }
        }
        (rel, abs)
    }
}

/// Compares `analytic` against central differences of `loss_fn` at every scalar
/// parameter. Relative error per coordinate is
/// `|a − n| / max(1e-8, |a| + |n|)`; the maximum is reported.
pub fn finite_diff_gradcheck<F>(mut loss_fn: F, params: &ParamStore, analytic: &Grads, eps: f64) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!((1e-6..=1e-4).contains(&eps), "eps must lie in [1e-6, 1e-4]");
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        entries: Vec::new(),
    };
    for id in params.ids() {
        for idx in 0..params.get(id).len() {
            let orig = params.get(id).as_slice().expect("params are contiguous")[idx];
            probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig + eps;
            let plus = loss_fn(&probe);
            probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig - eps;
            let minus = loss_fn(&probe);
            probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            report.entries.push(GradCheckEntry {
                param: params.name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                relative_error: rel,
            });
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_param = params.name(id).to_string();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_checks() {
        let mut store = ParamStore::new();
        let id = store.add("theta", array![[3.0]]);
        let mut grads = store.zeros_like();
        grads.get_mut(id)[[0, 0]] = 3.0;
        let report = finite_diff_gradcheck(|p| 0.5 * p.get(id)[[0, 0]].powi(2), &store, &grads, 1e-5);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
        assert!((report.numeric - 3.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        let id = store.add("theta", array![[3.0, -1.0]]);
        let mut grads = store.zeros_like();
        grads.get_mut(id).assign(&array![[3.0, 0.0]]);
        let report = finite_diff_gradcheck(|p| 0.5 * p.get(id).mapv(|v| v * v).sum(), &store, &grads, 1e-5);
        assert!(report.max_relative_error > 0.5);
        assert_eq!(report.worst_index, 1);
    }
}
