//! Central finite-difference gradient verification.
//!
//! The checker only calls an opaque loss closure, so it stays independent of
//! the tape internals it is used to validate.

use crate::error::Result;
use crate::models::ModelParams;
use crate::tensor::Tensor;

/// Numeric gradients of `loss` with respect to every parameter scalar,
/// by central differences with step `h`.
pub fn finite_difference_gradients(
    params: &ModelParams,
    h: f64,
    mut loss: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut probe = params.clone();
    let mut grads = Vec::with_capacity(params.tensors.len());
    for t in 0..params.tensors.len() {
        let len = params.tensors[t].value.len();
        let mut grad = Vec::with_capacity(len);
        for i in 0..len {
            let original = probe.tensors[t].value.values()[i];
            probe.tensors[t].value.values_mut()[i] = original + h;
            let up = loss(&probe)?;
            probe.tensors[t].value.values_mut()[i] = original - h;
            let down = loss(&probe)?;
            probe.tensors[t].value.values_mut()[i] = original;
            grad.push((up - down) / (2.0 * h));
        }
        let shape = params.tensors[t].value.shape();
        grads.push(Tensor::from_vec(shape.0, shape.1, grad)?);
    }
    Ok(grads)
}

/// Worst relative discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: String,
}

/// Relative error per entry, |a - n| / max(|a|, |n|, 1e-4); the floor makes
/// vanishing entries compare absolutely instead of amplifying noise.
pub fn compare_gradients(
    params: &ModelParams,
    analytic: &[Tensor],
    numeric: &[Tensor],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
    };
    for ((named, a), n) in params.tensors.iter().zip(analytic).zip(numeric) {
        for (i, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-4);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = format!("{}[{}]: analytic {av} vs numeric {nv}", named.name, i);
            }
        }
    }
    report
}
