//! Central finite-difference verification of graph gradients.

use std::collections::BTreeMap;

use crate::{GradError, Graph, Tensor, Var};

/// Outcome of [`fd_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Max over entries of `|analytic - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with the given `step`, over every entry of every
/// parameter whose tensor has `requires_grad` set.
///
/// `build` is invoked twice and both graphs evaluated; differing values mean
/// the function is not deterministic and the check is refused.
pub fn fd_check<F>(build: F, params: &BTreeMap<String, Tensor>, step: f64) -> Result<FdReport, GradError>
where
    F: Fn(&Graph) -> Result<Var, GradError>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(GradError::BadStep(step));
    }
    let graph = Graph::new();
    let root = build(&graph)?;
    let first = scalar_of(&graph.eval(params, root)?)?;
    let twin = Graph::new();
    let twin_root = build(&twin)?;
    let second = scalar_of(&twin.eval(params, twin_root)?)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradError::NonDeterministic(format!("two evaluations gave {first:e} and {second:e}")));
    }
    graph.eval_all(params)?;
    let analytic = graph.backward(root)?;

    let mut work = params.clone();
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let names: Vec<String> = params.iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n.clone()).collect();
    for name in names {
        let grad = analytic.get(&name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; params[&name].len()]);
        for idx in 0..params[&name].len() {
            let base = params[&name].data()[idx];
            work.get_mut(&name).expect("cloned").data_mut()[idx] = base + step;
            let plus = scalar_of(&graph.eval(&work, root)?)?;
            work.get_mut(&name).expect("cloned").data_mut()[idx] = base - step;
            let minus = scalar_of(&graph.eval(&work, root)?)?;
            work.get_mut(&name).expect("cloned").data_mut()[idx] = base;
            let fd = (plus - minus) / (2.0 * step);
            let err = (grad[idx] - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

fn scalar_of(t: &Tensor) -> Result<f64, GradError> {
    t.item().ok_or_else(|| GradError::NonScalarRoot(t.shape().to_vec()))
}
