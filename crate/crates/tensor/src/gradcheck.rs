//! Central finite-difference checks of tape gradients (64-bit).
//!
//! The relative error of a coordinate is `|analytic - numeric| /
//! max(|analytic|, |numeric|, REL_FLOOR)`; the floor keeps coordinates whose
//! true gradient is essentially zero from dominating the ratio.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = rel;
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", what());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks every coordinate of every parameter in `store` (or at most
/// `max_per_param` evenly spaced coordinates of each).
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    max_per_param: Option<usize>,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: for<'g> FnMut(&'g Graph<f64>, &'g ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<(ParamId, Tensor<f64>)> = {
        let g = Graph::new();
        let l = loss(&g, store)?;
        g.backward(l)?;
        g.param_grads()
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let step = max_per_param.map_or(1, |m| (n / m.max(1)).max(1));
        for j in (0..n).step_by(step) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + FD_EPS;
            let fp = eval(store, &mut loss)?;
            store.value_mut(id).data_mut()[j] = orig - FD_EPS;
            let fm = eval(store, &mut loss)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_EPS);
            report.record(
                || format!("{}[{j}]", store.get(id).name),
                grad.data()[j],
                numeric,
            );
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore<f64>, loss: &mut F) -> Result<f64>
where
    F: for<'g> FnMut(&'g Graph<f64>, &'g ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::no_grad();
    let l = loss(&g, store)?;
    Ok(l.item())
}

/// Checks gradients with respect to graph inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], mut loss: F) -> Result<GradCheckReport>
where
    F: for<'g> FnMut(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let l = loss(&g, &vars)?;
        g.backward(l)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_EPS;
            let fp = eval_inputs(&work, &mut loss)?;
            work[i].data_mut()[j] = orig - FD_EPS;
            let fm = eval_inputs(&work, &mut loss)?;
            work[i].data_mut()[j] = orig;
            report.record(
                || format!("input{i}[{j}]"),
                analytic[i].data()[j],
                (fp - fm) / (2.0 * FD_EPS),
            );
        }
    }
    Ok(report)
}

fn eval_inputs<F>(inputs: &[Tensor<f64>], loss: &mut F) -> Result<f64>
where
    F: for<'g> FnMut(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(loss(&g, &vars)?.item())
}
