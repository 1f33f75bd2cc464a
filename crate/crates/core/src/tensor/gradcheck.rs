//! Central finite-difference gradient checks at f64.

use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index (or parameter name and index) of the worst element.
    pub worst: String,
    pub checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.input(x.clone(), true);
    let loss = f(&g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.input(t, false);
        let l = f(&g, v)?;
        Ok(g.scalar(l))
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let e = rel_err(analytic.data()[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("{i}");
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every element of every parameter in `store` against central
/// differences of the scalar built by `f`.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_params_sampled(store, f, eps, usize::MAX)
}

/// Like [`grad_check_params`] but probes at most `per_tensor` evenly spaced
/// elements of each parameter.
pub fn grad_check_params_sampled<F>(store: &ParamStore<f64>, f: F, eps: f64, per_tensor: usize) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    work.zero_grad();
    work.accumulate(&g, &grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let l = f(&g, s)?;
        Ok(g.scalar(l))
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = work.get(id).grad_or_zeros();
        let name = store.get(id).name.clone();
        let len = analytic.numel();
        let picks: Vec<usize> = if per_tensor >= len {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|k| k * len / per_tensor).collect()
        };
        for i in picks {
            let orig = work.get(id).value().data()[i];
            work.get_mut(id).value_mut().data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).value_mut().data_mut()[i] = orig;
            let e = rel_err(analytic.data()[i], (fp - fm) / (2.0 * eps));
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
