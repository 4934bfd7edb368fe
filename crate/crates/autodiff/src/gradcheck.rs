//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Input (or parameter name) and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64> {
    tape.value(out).item()
}

/// Checks `f` against central differences at `inputs`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        eval_scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = run(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = run(&work)?;
            work[i].data_mut()[j] = orig;
            let err = rel_error(analytic.data()[j], (plus - minus) / (2.0 * eps));
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((format!("input{i}"), j));
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every trainable parameter of `store`.
pub fn gradcheck_params<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward_params(out, store)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work = store.clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable())
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let name = store.get(id).name().to_string();
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            let mut eval = |delta: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[j] = orig + delta;
                let mut t = Tape::new();
                let out = f(&mut t, &work)?;
                eval_scalar(&t, out)
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            work.value_mut(id).data_mut()[j] = orig;
            let err = rel_error(grads.get(id).data()[j], (plus - minus) / (2.0 * eps));
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}
