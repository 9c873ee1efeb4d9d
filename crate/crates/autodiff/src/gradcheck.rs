//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates forward passes, so it is independent of
//! the backward rules it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of [`relative_error`]; keeps near-zero gradients from
/// being judged on round-off alone.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (analytic, numeric) at the worst entry.
    pub worst: Option<(f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Checks every element of every input of a scalar function built by `f`.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.item(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic.data()[j], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Spot-checks selected parameter entries of a store-level loss against
/// an already computed analytic gradient.
pub fn check_params<F>(
    store: &mut ParamStore,
    analytic: &ParamGrads,
    entries: &[(ParamId, usize)],
    h: f64,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    for &(id, j) in entries {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[j] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[j] = orig;
        report.record(analytic.get(id).data()[j], (up - down) / (2.0 * h));
    }
    Ok(report)
}
