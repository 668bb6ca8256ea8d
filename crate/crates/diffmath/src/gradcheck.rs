//! Central finite-difference gradient checks.
//!
//! These only evaluate forward passes, so they stay independent of the
//! backward rules they are used to verify.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Entries with both gradients below this magnitude are compared
/// absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.checked += 1;
    }
}

/// Checks gradients of a scalar function with respect to its input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic[j], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar function with respect to stored parameters.
///
/// `select` picks which `(param, element)` pairs to perturb; pass `None`
/// to check every element of every parameter.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    select: Option<&[(ParamId, usize)]>,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut analytic: std::collections::HashMap<ParamId, Vec<f64>> = grads
        .param_grads()
        .map(|(id, g)| (id, g.data().to_vec()))
        .collect();

    let all: Vec<(ParamId, usize)>;
    let pairs = match select {
        Some(p) => p,
        None => {
            all = store
                .ids()
                .flat_map(|id| (0..store.value(id).len()).map(move |j| (id, j)))
                .collect();
            &all
        }
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradReport::default();
    for &(id, j) in pairs {
        let a = analytic
            .entry(id)
            .or_insert_with(|| vec![0.0; store.value(id).len()])[j];
        let orig = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = orig + eps;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[j] = orig - eps;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[j] = orig;
        report.record(a, (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}
