//! Central finite-difference check of analytic gradients.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::nn::to_f64_vec;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step for the central difference.
    pub step: f64,
    /// Upper bound on coordinates probed per parameter.
    pub max_coords: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords: 6,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(param, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `d loss / d var` from backprop with `(L(x+h) - L(x-h)) / 2h`.
///
/// Vars must be `f64`. Each var is restored to its original value.
pub fn check_gradients(
    vars: &[(String, Var)],
    loss: impl Fn() -> Result<Tensor>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let grads = loss()?.backward()?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for (name, var) in vars {
        let original = var.as_tensor().detach().copy()?;
        let values = to_f64_vec(&original)?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; values.len()],
        };
        let n = values.len();
        let stride = n.div_ceil(opts.max_coords.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut v = values.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, original.shape(), original.device())?)?;
                Ok(loss()?.to_scalar::<f64>()?)
            };
            let plus = eval_at(opts.step)?;
            let minus = eval_at(-opts.step)?;
            var.set(&original)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
