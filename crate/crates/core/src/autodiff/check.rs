//! Finite-difference verification of reverse-mode gradients.

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of [`check_grad`]. Components are numbered by flattening the
/// input tensors in order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_component: Option<usize>,
    pub checked: usize,
    /// Components whose central stencil straddles a relu/abs/max kink.
    pub skipped_kinks: usize,
    /// First component whose perturbed evaluation was not finite.
    pub non_finite: Option<usize>,
    /// Analytic and numeric derivative at the worst component.
    pub worst_pair: (f64, f64),
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, point: &[Array2<f64>]) -> Result<(f64, u64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.scalar_value(out), tape.kink_signature(), tape.len()))
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences `(f(x + eps e) - f(x - eps e)) / 2 eps`, componentwise.
///
/// The relative error uses the denominator `max(|analytic|, 1e-8)`.
pub fn check_grad<F>(f: F, point: &[Array2<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.grad(out, &vars)?;
    let base_sig = tape.kink_signature();
    let base_len = tape.len();
    drop(tape);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_component: None,
        checked: 0,
        skipped_kinks: 0,
        non_finite: None,
        worst_pair: (0.0, 0.0),
    };
    let mut shifted: Vec<Array2<f64>> = point.to_vec();
    let mut component = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for (flat, &a) in grad.iter().enumerate() {
            let idx = (flat / grad.ncols(), flat % grad.ncols());
            let x0 = point[t][idx];
            shifted[t][idx] = x0 + eps;
            let (fp, sig_p, len_p) = evaluate(&f, &shifted)?;
            shifted[t][idx] = x0 - eps;
            let (fm, sig_m, len_m) = evaluate(&f, &shifted)?;
            shifted[t][idx] = x0;

            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = Some(component);
                report.max_rel_error = f64::INFINITY;
                report.worst_component = Some(component);
                return Ok(report);
            }
            let same_piece = sig_p == base_sig
                && sig_m == base_sig
                && len_p == base_len
                && len_m == base_len;
            if !same_piece {
                report.skipped_kinks += 1;
                component += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(1e-8);
            if rel > report.max_rel_error || report.worst_component.is_none() {
                report.max_rel_error = rel;
                report.worst_component = Some(component);
                report.worst_pair = (a, numeric);
            }
            report.checked += 1;
            component += 1;
        }
    }
    Ok(report)
}
