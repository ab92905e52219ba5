use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{MistError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst entry.
    pub worst_param_path: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<F>(loss_fn: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    Ok(g.value(loss).item())
}

/// Reverse-mode gradients of `loss_fn` for every parameter in `store`.
pub fn analytic_gradients<F>(loss_fn: &F, store: &ParamStore) -> Result<Vec<Tensor>>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    g.backward(loss)?;
    Ok(g.param_grads(store))
}

/// Compares reverse-mode gradients with central finite differences over
/// every parameter entry.
///
/// Uses the fourth-order central stencil
/// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, which keeps truncation
/// error far below the rounding floor for `h` near `1e-4`.
pub fn grad_check<F>(loss_fn: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let analytic = analytic_gradients(&loss_fn, store)?;
    compare_gradients(loss_fn, store, eps, &analytic)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients.
pub fn compare_gradients<F>(
    loss_fn: F,
    store: &ParamStore,
    eps: f64,
    analytic: &[Tensor],
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(eps > 1e-7 && eps < 1e-3) {
        return Err(MistError::Invalid(format!("grad_check eps {eps} outside (1e-7, 1e-3)")));
    }
    if analytic.len() != store.len() {
        return Err(MistError::Invalid("analytic gradient count differs from parameter count".into()));
    }
    let first = eval_loss(&loss_fn, store)?;
    let second = eval_loss(&loss_fn, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(MistError::NonDeterministic { first, second });
    }

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param_path: String::new(),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let base = store.get(id).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = base + offset;
                eval_loss(&loss_fn, &work)
            };
            let f_m2 = at(-2.0 * eps)?;
            let f_m1 = at(-eps)?;
            let f_p1 = at(eps)?;
            let f_p2 = at(2.0 * eps)?;
            work.get_mut(id).data_mut()[i] = base;

            let numeric = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * eps);
            let a = analytic[id.0].data()[i];
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param_path.is_empty() {
                report.max_rel_error = rel;
                report.worst_param_path = format!("{}[{i}]", store.name(id));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(store: &ParamStore, g: &mut Graph) -> Result<Var> {
        let w = g.param(store, crate::numerics::params::ParamId(0));
        let sq = g.mul(w, w)?;
        g.sum(sq)
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(1, 4, vec![0.5, -1.25, 2.0, 0.75]).unwrap());
        s
    }

    #[test]
    fn quadratic_matches_exactly() {
        let s = store();
        let r = grad_check(quadratic, &s, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.entries_checked, 4);
        let analytic = analytic_gradients(&quadratic, &s).unwrap();
        assert_eq!(analytic[0].data(), &[1.0, -2.5, 4.0, 1.5]);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let s = store();
        let mut analytic = analytic_gradients(&quadratic, &s).unwrap();
        analytic[0].data_mut()[2] *= 2.0;
        let r = compare_gradients(quadratic, &s, 1e-4, &analytic).unwrap();
        assert!(r.max_rel_error > 0.3);
        assert_eq!(r.worst_param_path, "w[2]");
    }

    #[test]
    fn eps_range_enforced() {
        assert!(grad_check(quadratic, &store(), 1e-2).is_err());
        assert!(grad_check(quadratic, &store(), 1e-8).is_err());
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let f = |store: &ParamStore, g: &mut Graph| {
            calls.set(calls.get() + 1);
            let w = g.param(store, crate::numerics::params::ParamId(0));
            let s = g.sum(w)?;
            g.scale(s, 1.0 + calls.get() as f64 * 1e-3)
        };
        assert!(matches!(
            grad_check(f, &store(), 1e-4),
            Err(MistError::NonDeterministic { .. })
        ));
    }
}
