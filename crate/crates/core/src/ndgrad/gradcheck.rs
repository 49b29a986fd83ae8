//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used for the numeric side, so the check is
//! independent of every backward rule it validates.

use super::Tensor;
use crate::error::{Error, Result};

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(max |numeric|, max |analytic|)` over
    /// all inputs, computed per input tensor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the gradients of scalar `f` w.r.t. each of `inputs` (trainable
/// leaves) against central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if let Some(bad) = inputs.iter().find(|t| !t.requires_grad() || !t.is_leaf()) {
        return Err(Error::Contract(format!(
            "gradient check inputs must be trainable leaves, got {bad:?}"
        )));
    }
    inputs.iter().for_each(Tensor::zero_grad);
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0 };
    for (t, a) in inputs.iter().zip(&analytic) {
        let base = t.to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            t.set_data(probe.clone())?;
            let up = f(inputs)?.item();
            probe[i] = base[i] - h;
            t.set_data(probe)?;
            let down = f(inputs)?.item();
            numeric.push((up - down) / (2.0 * h));
        }
        t.set_data(base)?;
        let abs = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(abs / scale);
    }
    inputs.iter().for_each(Tensor::zero_grad);
    Ok(report)
}
