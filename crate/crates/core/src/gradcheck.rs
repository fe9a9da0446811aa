//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / DENOM_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compares the graph gradient of a scalar loss against central differences
/// for every element of the selected parameters.
///
/// `build` must be deterministic: it is re-run twice per checked scalar.
/// `corrupt` adds a constant to every analytic gradient, for negative controls.
pub fn grad_check<F>(
    store: &mut ParamStore,
    select: &[ParamId],
    corrupt: Option<f64>,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g)?;
        check_finite(g.value(loss).item())?;
        g.backward(loss)?.into_params()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for &id in select {
        let n = store.get(id).len();
        for i in 0..n {
            let original = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = original + STEP;
            let plus = eval(store, &build)?;
            store.get_mut(id).data_mut()[i] = original - STEP;
            let minus = eval(store, &build)?;
            store.get_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let mut a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            if let Some(c) = corrupt {
                a += c;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = build(&mut g)?;
    let v = g.value(loss).item();
    check_finite(v)?;
    Ok(v)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("loss evaluated to {v} during gradient check")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(3.0));
        let report = grad_check(&mut store, &[x], None, |g| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(3.0));
        let report = grad_check(&mut store, &[x], Some(0.5), |g| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(f64::INFINITY));
        let err = grad_check(&mut store, &[x], None, |g| {
            let v = g.param(x);
            Ok(g.sum(v))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn zero_gradients_do_not_blow_up() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(0.0, 1e-12) - 1e-4).abs() < 1e-12);
    }
}
