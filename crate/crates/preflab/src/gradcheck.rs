//! Central finite-difference oracle.
//!
//! Every closed-form derivative in the crate is validated against this
//! module before it is trusted. The oracle depends only on loss *values*,
//! never on the derivative code paths it checks.

use thiserror::Error;

use crate::fmt::{bool_csv, f64_csv};
use crate::losses::{LossError, LossSpec};

/// Floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-12;

/// Near a stationary point the relative error is meaningless; when both the
/// analytic and numeric magnitudes are below this bound, the check passes
/// on absolute error. Central differences bottom out around `ε/h ≈ 1e-10`,
/// so the bound must sit above that rounding floor.
pub const STATIONARY_ABS_TOL: f64 = 1e-8;

/// Step used for finite differences in logits space.
pub const LOGITS_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("grid must be non-empty")]
    EmptyGrid,
    #[error("function evaluated to a non-finite value at {x}")]
    NonFiniteEval { x: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Outcome of one derivative comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// The point the derivative was taken at.
    pub input: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    /// `abs_err / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub rel_err: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn from_values(input: f64, analytic: f64, numeric: f64, tol: f64) -> Self {
        let abs_err = (analytic - numeric).abs();
        let rel_err = abs_err / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let stationary = analytic.abs() < STATIONARY_ABS_TOL && numeric.abs() < STATIONARY_ABS_TOL;
        Self {
            input,
            analytic,
            numeric,
            abs_err,
            rel_err,
            pass: rel_err <= tol || stationary,
        }
    }

    pub const CSV_HEADER: &'static str = "input,analytic,numeric,abs_err,rel_err,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            f64_csv(self.input),
            f64_csv(self.analytic),
            f64_csv(self.numeric),
            f64_csv(self.abs_err),
            f64_csv(self.rel_err),
            bool_csv(self.pass)
        )
    }
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> Result<f64, GradCheckError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(GradCheckError::InvalidStep(h));
    }
    let hi = f(x + h);
    if !hi.is_finite() {
        return Err(GradCheckError::NonFiniteEval { x: x + h });
    }
    let lo = f(x - h);
    if !lo.is_finite() {
        return Err(GradCheckError::NonFiniteEval { x: x - h });
    }
    Ok((hi - lo) / (2.0 * h))
}

/// Relative step for probability- and parameter-space checks, where inputs
/// span many orders of magnitude.
pub fn relative_step(x: f64) -> f64 {
    (1e-8 * x.abs()).max(1e-8)
}

/// Checks a loss's `d_dlogits` against the central difference of its value
/// at every grid point.
pub fn check_loss_grads(
    spec: &LossSpec,
    grid: &[f64],
    tol: f64,
) -> Result<Vec<GradReport>, GradCheckError> {
    if grid.is_empty() {
        return Err(GradCheckError::EmptyGrid);
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(GradCheckError::InvalidTolerance(tol));
    }
    grid.iter()
        .map(|&logits| {
            let analytic = spec.eval_at(logits)?.d_dlogits;
            let numeric = central_diff(
                |t| spec.eval_at(t).map(|e| e.value).unwrap_or(f64::NAN),
                logits,
                LOGITS_STEP,
            )?;
            Ok(GradReport::from_values(logits, analytic, numeric, tol))
        })
        .collect()
}

/// Uniformly spaced grid including both endpoints.
pub fn linear_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2 && max > min);
    (0..points)
        .map(|i| min + (max - min) * i as f64 / (points - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics_up_to_rounding() {
        let d = central_diff(|x| x * x, 3.0, 1e-6).unwrap();
        assert!((d - 6.0).abs() < 1e-9);
    }

    #[test]
    fn zero_for_constants() {
        let d = central_diff(|_| 4.25, 10.0, 1e-6).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn cross_checks_the_spo_derivative() {
        let spec = LossSpec::spo(0.1).unwrap();
        let analytic = spec.eval_at(5.0).unwrap().d_dlogits;
        let numeric = central_diff(|t| spec.eval_at(t).unwrap().value, 5.0, LOGITS_STEP).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs();
        assert!(rel < 1e-5, "rel={rel}");
    }

    #[test]
    fn rejects_bad_steps_and_propagates_non_finite_evaluations() {
        assert!(matches!(
            central_diff(|x| x, 0.0, 0.0),
            Err(GradCheckError::InvalidStep(_))
        ));
        assert!(matches!(
            central_diff(|x| (x - 1.0).ln(), 1.0, 0.5),
            Err(GradCheckError::NonFiniteEval { .. })
        ));
    }

    #[test]
    fn halving_the_step_quarters_the_truncation_error() {
        // Order-2 convergence on f = e^x at x = 1.
        let truth = 1.0f64.exp();
        let err = |h: f64| (central_diff(|x| x.exp(), 1.0, h).unwrap() - truth).abs();
        let ratio = err(1e-3) / err(5e-4);
        assert!((3.0..=5.0).contains(&ratio), "ratio={ratio}");
    }

    #[test]
    fn dpo_grid_reports_all_pass() {
        let spec = LossSpec::dpo(1.0).unwrap();
        let reports = check_loss_grads(&spec, &[-10.0, 0.0, 10.0], 1e-5).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.pass));
    }

    #[test]
    fn spo_stationary_point_passes_via_the_absolute_branch() {
        let spec = LossSpec::spo(0.1).unwrap();
        let reports = check_loss_grads(&spec, &[10.0], 1e-5).unwrap();
        let r = &reports[0];
        assert_eq!(r.analytic, 0.0);
        assert!(r.numeric.abs() < 1e-8);
        assert!(r.pass);
    }

    #[test]
    fn squared_target_at_its_target_passes() {
        let spec = LossSpec::squared_target(0.5, 1.0).unwrap();
        let reports = check_loss_grads(&spec, &[2.0], 1e-5).unwrap();
        assert_eq!(reports[0].analytic, 0.0);
        assert!(reports[0].pass);
    }

    #[test]
    fn full_grid_passes_for_all_losses_and_betas() {
        let grid = linear_grid(-20.0, 20.0, 201);
        for beta in [0.05, 0.1, 0.5, 1.0, 5.0] {
            for spec in [
                LossSpec::dpo(beta).unwrap(),
                LossSpec::spo(beta).unwrap(),
                LossSpec::squared_target(beta, 1.0).unwrap(),
            ] {
                let reports = check_loss_grads(&spec, &grid, 1e-5).unwrap();
                for r in &reports {
                    assert!(
                        r.pass,
                        "{:?} beta={beta} at logits={}: rel={}",
                        spec.kind, r.input, r.rel_err
                    );
                }
            }
        }
    }

    #[test]
    fn empty_grid_and_bad_tolerance_are_rejected() {
        let spec = LossSpec::dpo(1.0).unwrap();
        assert!(matches!(
            check_loss_grads(&spec, &[], 1e-5),
            Err(GradCheckError::EmptyGrid)
        ));
        assert!(matches!(
            check_loss_grads(&spec, &[0.0], 0.0),
            Err(GradCheckError::InvalidTolerance(_))
        ));
    }
}
