//! Central-difference gradient verification.
//!
//! [`grad_check`] evaluates a scalar loss at `x ± eps` for every coordinate
//! of every parameter and compares the quotient `(f(x+eps) - f(x-eps)) /
//! (2 eps)` against the tape's analytic gradient. The relative error for a
//! coordinate uses the denominator `max(1e-8, |analytic| + |numeric|)`, so
//! coordinates where both sides vanish count as exact.

use super::tape::{grad, Tape, Var};
use super::Matrix;
use crate::error::Result;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct WorstCoord {
    /// Index of the parameter matrix.
    pub param: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// Largest relative error across all coordinates of all parameters.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub coords_checked: usize,
    /// The coordinate attaining `max_rel_err`, if any coordinate was checked.
    pub worst: Option<WorstCoord>,
}

/// Compares the tape's analytic gradients of the loss built by `build`
/// against central differences at every coordinate of `params`.
///
/// `build` must be a pure function of the parameter values: it is re-invoked
/// on a fresh tape for every perturbed evaluation.
///
/// # Errors
/// Propagates any error from `build`.
pub fn grad_check<F>(params: &[Matrix], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = grad(params, &build)?;

    let eval = |p: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|m| tape.constant(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for r in 0..p.rows() {
            for c in 0..p.cols() {
                let orig = p.get(r, c);
                work[pi].set(r, c, orig + eps);
                let plus = eval(&work)?;
                work[pi].set(r, c, orig - eps);
                let minus = eval(&work)?;
                work[pi].set(r, c, orig);

                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[pi].get(r, c);
                let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
                report.coords_checked += 1;
                if rel >= report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some(WorstCoord {
                        param: pi,
                        row: r,
                        col: c,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
