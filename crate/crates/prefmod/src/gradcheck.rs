//! Central finite-difference verification of analytic gradients.
//!
//! Deliberately independent of the tape's backward pass: the loss closure is
//! re-evaluated from scratch at perturbed parameter values, so agreement
//! here validates every VJP on the path.

use std::collections::BTreeMap;

use crate::tensor::{GradMap, Result, Tensor};

/// Comparison rule: relative error against the larger magnitude when the
/// gradients are meaningfully sized, absolute error near zero.
pub const REL_TOL: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-9;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare `analytic` against central differences of `loss_fn` over every
/// entry of every parameter in `params`.
pub fn check_gradients<F>(
    params: &BTreeMap<String, Tensor>,
    loss_fn: F,
    analytic: &GradMap,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let mut working = params.clone();
    for (name, value) in params {
        let grad = match analytic.get(name) {
            Some(g) => g.clone(),
            None => Tensor::zeros(value.shape()),
        };
        for i in 0..value.numel() {
            let base = value.data().to_vec();

            let mut plus = base.clone();
            plus[i] += step;
            working.insert(name.clone(), Tensor::new(value.shape().to_vec(), plus)?);
            let f_plus = loss_fn(&working)?;

            let mut minus = base.clone();
            minus[i] -= step;
            working.insert(name.clone(), Tensor::new(value.shape().to_vec(), minus)?);
            let f_minus = loss_fn(&working)?;

            working.insert(name.clone(), value.clone());

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs());
            report.checked += 1;
            if denom >= ABS_FLOOR {
                let rel = (a - numeric).abs() / denom;
                report.worst_rel = report.worst_rel.max(rel);
                if rel > rel_tol {
                    report.failures.push(format!(
                        "{name}[{i}]: analytic {a:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
                    ));
                }
            } else if (a - numeric).abs() > ABS_TOL {
                report.failures.push(format!(
                    "{name}[{i}]: analytic {a:.3e} vs numeric {numeric:.3e} (abs)"
                ));
            }
        }
    }
    Ok(report)
}
