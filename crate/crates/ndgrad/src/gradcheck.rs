//! Central finite-difference validation of tape gradients.

use crate::error::{NdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`]. `worst` locates the largest relative error as
/// (parameter index, element index).
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Compare `backward` against `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` for every
/// parameter element. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_with(f, params, step, 1e-8)
}

/// [`grad_check`] with an explicit denominator floor. Gradients far below
/// the floor are compared on absolute error, which keeps finite-difference
/// round-off on near-zero entries from dominating the report.
pub fn grad_check_with<F>(f: F, params: &[Tensor], step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(floor > 0.0) {
        return Err(NdError::InvalidArgument {
            op: "grad_check",
            reason: format!("floor must be positive, got {floor}"),
        });
    }
    if !(step > 0.0) {
        return Err(NdError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.item().is_finite() {
            return Err(NdError::NonFinite {
                param: 0,
                element: 0,
            });
        }
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            probe[pi].data_mut()[ei] = orig + step;
            let plus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig - step;
            let minus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NdError::NonFinite {
                    param: pi,
                    element: ei,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
