//! Central finite-difference checks against [`Tape::backward`].
//!
//! The numeric side only re-evaluates the forward trace through
//! [`Tape::replay`], so it shares no code with gradient accumulation.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for relative error, so exact zeros compare on an
/// absolute scale of `REL_FLOOR * tolerance`.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `loss` with central differences for every
/// entry of every parameter in `params`.
pub fn check_gradients(tape: &Tape, loss: Var, params: &[Var], eps: f64) -> Result<GradCheckReport> {
    let analytic = tape.backward(loss, params)?;
    let mut report = Vec::with_capacity(params.len());
    for (index, (&p, grad)) in params.iter().zip(&analytic).enumerate() {
        let base = tape.value(p).clone();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..base.numel() {
            let numeric = central_difference(tape, loss, p, &base, k, eps)?;
            let a = grad.data()[k];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        report.push(ParamCheck {
            index,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            entries: base.numel(),
        });
    }
    Ok(GradCheckReport { params: report })
}

fn central_difference(tape: &Tape, loss: Var, p: Var, base: &Tensor, k: usize, eps: f64) -> Result<f64> {
    let mut plus = base.clone();
    plus.data_mut()[k] += eps;
    let mut minus = base.clone();
    minus.data_mut()[k] -= eps;
    let f_plus = tape.replay(loss, &[(p, &plus)])?.item();
    let f_minus = tape.replay(loss, &[(p, &minus)])?.item();
    Ok((f_plus - f_minus) / (2.0 * eps))
}
