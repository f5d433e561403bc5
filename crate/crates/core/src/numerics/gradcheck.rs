//! Central finite-difference oracle for autodiff gradients.

use super::graph::{GradFault, Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Perturbs every entry of the listed parameters by ±`h`, rebuilds the loss
/// with `build`, and compares `(L(+h) − L(−h)) / 2h` against the autodiff
/// gradient. The error of one entry is `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `fault` is applied to the analytic pass only.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    which: &[ParamId],
    h: f64,
    fault: Option<GradFault>,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let grads = {
        let mut g = Graph::new(params).with_fault(fault);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    for &pid in which {
        let analytic = grads.get_or_zeros(pid, params);
        for i in 0..analytic.len() {
            let orig = params.get(pid).data()[i];
            params.get_mut(pid).data_mut()[i] = orig + h;
            let plus = eval(params)?;
            params.get_mut(pid).data_mut()[i] = orig - h;
            let minus = eval(params)?;
            params.get_mut(pid).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(pid).to_string(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
