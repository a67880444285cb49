//! Central finite-difference gradient checks.
//!
//! Numeric derivatives only ever evaluate forward values, so they stay
//! independent of the backward rules they are used to verify.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// (analytic, numeric) at the worst entry.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = (analytic, numeric);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `f` against central differences with step `h` for every element of
/// every input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.var(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").clone();
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic.data()[j], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to stored parameters.
///
/// At most `per_param` evenly spaced coordinates of each parameter are
/// perturbed (`None` checks all of them).
pub fn check_params<F>(
    store: &ParamStore,
    h: f64,
    per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        let zero = Tensor::zeros(store.value(id).shape().to_vec());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for j in coords(store.value(id).numel(), per_param) {
            let numeric = central_difference(&mut work, id, j, h, &f)?;
            report.record(analytic.data()[j], numeric);
        }
    }
    Ok(report)
}

fn coords(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

fn central_difference<F>(work: &mut ParamStore, id: ParamId, j: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let orig = work.value(id).data()[j];
    let eval = |x: f64, work: &mut ParamStore| -> Result<f64> {
        work.value_mut(id).data_mut()[j] = x;
        let mut g = Graph::new();
        let l = f(&mut g, work)?;
        Ok(g.value(l).item())
    };
    let fp = eval(orig + h, work)?;
    let fm = eval(orig - h, work)?;
    work.value_mut(id).data_mut()[j] = orig;
    Ok((fp - fm) / (2.0 * h))
}
