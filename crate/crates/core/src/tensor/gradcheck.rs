//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked coordinates.
    pub max_abs_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` builds the computation once from leaf parameters and returns a scalar
/// loss node. The analytic side runs the normal f32 backward pass. The
/// numeric side replays the recorded graph in f64 with one coordinate
/// perturbed by `±step`, so the difference quotient is not drowned in f32
/// rounding noise. Relative error uses a denominator floor of 1e-3: below
/// the floor the comparison is effectively absolute at tolerance times 1e-3,
/// which sits above the f32 noise carried by near-zero gradients of deep
/// graphs yet still flags dropped terms well under typical magnitudes.
///
/// The report does not hide non-differentiable points: if `f` kinks inside
/// the `±step` bracket the mismatch shows up in `max_rel_err`.
pub fn grad_check<F>(params: &[Tensor], mut f: F, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.scalar(loss)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check base loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut checked = 0usize;

    for (pi, p) in params.iter().enumerate() {
        let mut base_vals: Vec<f64> = p.data().iter().map(|&x| x as f64).collect();
        for i in 0..p.numel() {
            let orig = base_vals[i];
            base_vals[i] = orig + step;
            let plus = tape.replay_scalar_f64(loss, vars[pi], &base_vals)?;
            base_vals[i] = orig - step;
            let minus = tape.replay_scalar_f64(loss, vars[pi], &base_vals)?;
            base_vals[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference quotient".into()));
            }
            let exact = analytic[pi].as_ref().map_or(0.0, |g| g[i] as f64);
            let abs = (numeric - exact).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(1e-3);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
    })
}
