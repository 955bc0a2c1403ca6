//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries where both
    /// gradients are near zero are compared in absolute terms.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn f64_default() -> Self {
        GradCheckConfig { eps: 1e-5, tolerance: 1e-5, floor: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences, element by element, for every parameter in `store`. The
/// graph passed to `f` runs in evaluation mode, so `f` must be deterministic.
pub fn finite_diff_check<F: Element>(
    store: &mut ParameterStore<F>,
    f: impl Fn(&mut Graph<'_, F>) -> Result<Var>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let eval = |store: &ParameterStore<F>| -> Result<f64> {
        let mut g = Graph::eval(store);
        let out = f(&mut g)?;
        let v = g.scalar(out).to_f64().unwrap();
        if !v.is_finite() {
            return Err(Error::NumericalError(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::eval(store);
        let out = f(&mut g)?;
        let v = g.scalar(out).to_f64().unwrap();
        if !v.is_finite() {
            return Err(Error::NumericalError(format!("objective evaluated to {v}")));
        }
        g.backward(out)?
    };

    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport { params: Vec::new(), max_rel_error: 0.0, passed: true };
    for id in ids {
        let shape = store.value(id).dim();
        let zero = ndarray::Array2::<F>::zeros(shape);
        let grad = analytic.param(id).unwrap_or(&zero).clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
        };
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + F::c(cfg.eps);
                let plus = eval(store)?;
                store.value_mut(id)[[r, c]] = orig - F::c(cfg.eps);
                let minus = eval(store)?;
                store.value_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * cfg.eps);
                let a = grad[[r, c]].to_f64().unwrap();
                check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
                check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric, cfg.floor));
                check.checked += 1;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}
