use std::collections::BTreeMap;

use super::tape::{Params, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_GRADCHECK_EPS: f64 = 1e-5;

/// Worst disagreement between analytic and numeric gradient in one
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < tol)
    }
}

fn evaluate<F>(f: &F, params: &Params) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`, one coordinate at a time. The error
/// per coordinate is `|a - n| / max(1, |a|, |n|)`.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// make the check unusable and are reported as a usage error.
pub fn grad_check<F>(f: F, params: &Params, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss_var = f(&mut tape, &vars)?;
    let loss = tape.value(loss_var).item();
    let grads = tape.backward(loss_var)?;

    let again = evaluate(&f, params)?;
    if again.to_bits() != loss.to_bits() {
        return Err(Error::Usage(format!(
            "function is non-deterministic ({loss} vs {again}); gradient check unusable"
        )));
    }

    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let analytic = grads.get(name).expect("every bound parameter has a gradient");
        let mut worst = GroupError {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..tensor.len() {
            let orig = tensor.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst.max_rel_err || k == 0 {
                worst.max_rel_err = err;
                worst.worst_index = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        groups.push(worst);
    }
    Ok(GradCheckReport { loss, groups })
}
