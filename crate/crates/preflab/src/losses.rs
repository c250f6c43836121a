//! The three preference losses as pure scalar functions of the logits
//! difference, with exact first derivatives.
//!
//! With `Δ` the logits difference and `X = β·Δ`:
//!
//! - DPO: `L = −log σ(X)`, strictly decreasing in `Δ`; its gradient with
//!   respect to the losing probability is `β·σ(−X)/Π_l`.
//! - SPO: `L = −X·e^{−X}`, minimized at `X = 1` with value `−1/e`;
//!   `∂L/∂X = (X−1)e^{−X}`, so the gradient with respect to `Π_l` is
//!   `−(X−1)e^{−X}·β/Π_l` and both decay to zero as `X → ∞`.
//! - Squared target: `L = (Δ − g/β)²` for a known reward gap `g`.
//!
//! The canonical derivative exposed is `d_dlogits` (with respect to the raw
//! logits difference, not `X`), so policies never need to know `β`.
//! Everything here is pure and stateless; all randomness lives in `datagen`
//! and `trainer`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{prob_floor, CoreError, LogitsDiff};

/// Floor on `X = β·logits` below which `e^{−X}` would overflow double
/// precision. Crossing it is an error, not a clamp: sweeps intentionally
/// probe extreme `X`, and a silently clamped value would poison them.
pub const DEFAULT_X_FLOOR: f64 = -700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("squared-target loss requires a finite reward gap, got {0}")]
    InvalidGap(f64),
    #[error("expected a {expected} loss spec, got {got}")]
    KindMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("e^(-X) overflows: X = {x} is below the floor {floor}")]
    ExpOverflow { x: f64, floor: f64 },
    #[error("{what} must lie in (0, 1], got {value}")]
    InvalidProbability { what: &'static str, value: f64 },
    #[error("{0} loss has no pair-probability gradient")]
    UnsupportedKind(&'static str),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Which loss to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    Spo,
    SquaredTarget,
}

impl LossKind {
    /// Short token used in CSV columns and on the command line.
    pub fn token(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Spo => "spo",
            LossKind::SquaredTarget => "sq",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "dpo" => Some(LossKind::Dpo),
            "spo" => Some(LossKind::Spo),
            "sq" | "squared_target" => Some(LossKind::SquaredTarget),
            _ => None,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// A fully specified loss: kind plus `β`, and for the squared-target
/// variant the assumed reward gap `r_w − r_l`. The unknown gap is not a
/// parameter of DPO or SPO; it is absorbed into `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub beta: f64,
    /// Reward gap target, in reward units; used by `SquaredTarget` only.
    #[serde(default)]
    pub target_reward_gap: f64,
    /// Overflow floor on `X = β·logits`; see [`DEFAULT_X_FLOOR`].
    #[serde(default = "default_x_floor")]
    pub x_floor: f64,
}

fn default_x_floor() -> f64 {
    DEFAULT_X_FLOOR
}

impl LossSpec {
    pub fn dpo(beta: f64) -> Result<Self, LossError> {
        Self::build(LossKind::Dpo, beta, 0.0)
    }

    pub fn spo(beta: f64) -> Result<Self, LossError> {
        Self::build(LossKind::Spo, beta, 0.0)
    }

    pub fn squared_target(beta: f64, target_reward_gap: f64) -> Result<Self, LossError> {
        Self::build(LossKind::SquaredTarget, beta, target_reward_gap)
    }

    pub fn build(kind: LossKind, beta: f64, target_reward_gap: f64) -> Result<Self, LossError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(LossError::InvalidBeta(beta));
        }
        if kind == LossKind::SquaredTarget && !target_reward_gap.is_finite() {
            return Err(LossError::InvalidGap(target_reward_gap));
        }
        Ok(Self {
            kind,
            beta,
            target_reward_gap,
            x_floor: DEFAULT_X_FLOOR,
        })
    }

    pub fn validate(&self) -> Result<(), LossError> {
        Self::build(self.kind, self.beta, self.target_reward_gap).map(|_| ())
    }

    /// Evaluates the loss and its derivative at a logits difference.
    pub fn eval(&self, logits: LogitsDiff) -> Result<LossEval, LossError> {
        match self.kind {
            LossKind::Dpo => eval_dpo(self, logits),
            LossKind::Spo => eval_spo(self, logits),
            LossKind::SquaredTarget => eval_squared_target(self, logits),
        }
    }

    /// Convenience wrapper constructing the [`LogitsDiff`] first.
    pub fn eval_at(&self, logits: f64) -> Result<LossEval, LossError> {
        self.eval(LogitsDiff::new(logits)?)
    }
}

/// Loss value and its derivative with respect to the raw logits difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub value: f64,
    pub d_dlogits: f64,
}

/// Numerically stable `σ(x) = 1/(1+e^{−x})`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^{x})`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable `ln σ(x) = −softplus(−x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `L_DPO = −log σ(β·Δ)`; `dL/dΔ = −β·σ(−β·Δ)`.
///
/// The value is always positive and the derivative always negative: the
/// loss keeps rewarding larger logits without bound.
pub fn eval_dpo(spec: &LossSpec, logits: LogitsDiff) -> Result<LossEval, LossError> {
    expect_kind(spec, LossKind::Dpo)?;
    let x = spec.beta * logits.value();
    Ok(LossEval {
        value: softplus(-x),
        d_dlogits: -spec.beta * sigmoid(-x),
    })
}

/// `L_SPO = −X·e^{−X}` with `X = β·Δ`; `dL/dΔ = β·(X−1)·e^{−X}`.
///
/// Errors with [`LossError::ExpOverflow`] when `X` falls below the spec's
/// `x_floor` and `e^{−X}` would overflow.
pub fn eval_spo(spec: &LossSpec, logits: LogitsDiff) -> Result<LossEval, LossError> {
    expect_kind(spec, LossKind::Spo)?;
    let x = spec.beta * logits.value();
    if x < spec.x_floor {
        return Err(LossError::ExpOverflow {
            x,
            floor: spec.x_floor,
        });
    }
    let e = (-x).exp();
    let eval = LossEval {
        value: -x * e,
        d_dlogits: spec.beta * (x - 1.0) * e,
    };
    // Just above the floor the *products* can still overflow for large
    // beta, e.g. beta*(X-1)*e^{-X} at X = -700, beta = 100.
    if !(eval.value.is_finite() && eval.d_dlogits.is_finite()) {
        return Err(LossError::ExpOverflow {
            x,
            floor: spec.x_floor,
        });
    }
    Ok(eval)
}

/// `L = (Δ − g/β)²`; `dL/dΔ = 2(Δ − g/β)`.
pub fn eval_squared_target(spec: &LossSpec, logits: LogitsDiff) -> Result<LossEval, LossError> {
    expect_kind(spec, LossKind::SquaredTarget)?;
    let t = logits.value() - spec.target_reward_gap / spec.beta;
    let eval = LossEval {
        value: t * t,
        d_dlogits: 2.0 * t,
    };
    if !eval.value.is_finite() {
        return Err(LossError::Core(CoreError::NonFinite {
            what: format!("squared-target loss at logits {}", logits.value()),
        }));
    }
    Ok(eval)
}

fn expect_kind(spec: &LossSpec, expected: LossKind) -> Result<(), LossError> {
    spec.validate()?;
    if spec.kind != expected {
        return Err(LossError::KindMismatch {
            expected: expected.token(),
            got: spec.kind.token(),
        });
    }
    Ok(())
}

/// A partial derivative with respect to one pair probability.
///
/// The closed forms are products of an exponentially small and an
/// exponentially large factor, so alongside the plain `value` the log
/// magnitude is carried for sweeps that walk `Π_l` across hundreds of
/// orders of magnitude. `value = sign · exp(log_abs)` whenever that product
/// is representable; `saturated` marks points where the differentiated
/// probability sits at or below the table floor and the plain value should
/// not be trusted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiGrad {
    pub value: f64,
    /// Natural log of |gradient|; `-inf` at an exact zero.
    pub log_abs: f64,
    /// −1, 0, or +1.
    pub sign: f64,
    pub saturated: bool,
}

impl PiGrad {
    fn from_parts(sign: f64, log_abs: f64, saturated: bool) -> Self {
        Self {
            value: sign * log_abs.exp(),
            log_abs,
            sign,
            saturated,
        }
    }
}

/// Closed-form `∂L/∂Π_l` holding `Π_w` and both reference probabilities
/// fixed; equals `d_dlogits · (−1/Π_l)` by the chain rule.
///
/// - DPO: `β·σ(−X)/Π_l` (always positive),
/// - SPO: `−(X−1)·e^{−X}·β/Π_l` (zero at `X = 1`).
pub fn grad_wrt_pi_l(
    spec: &LossSpec,
    pi_w: f64,
    pi_l: f64,
    ref_w: f64,
    ref_l: f64,
) -> Result<PiGrad, LossError> {
    let point = GradPoint::new(spec, pi_w, pi_l, ref_w, ref_l)?;
    let saturated = pi_l <= prob_floor();
    match spec.kind {
        LossKind::Dpo => {
            // log|g| = ln β + ln σ(−X) − ln Π_l
            let log_abs = spec.beta.ln() + log_sigmoid(-point.x) - pi_l.ln();
            Ok(PiGrad::from_parts(1.0, log_abs, saturated))
        }
        LossKind::Spo => {
            point.check_spo_floor(spec)?;
            if point.x == 1.0 {
                return Ok(PiGrad::from_parts(0.0, f64::NEG_INFINITY, saturated));
            }
            let log_abs = spec.beta.ln() + (point.x - 1.0).abs().ln() - point.x - pi_l.ln();
            let sign = if point.x > 1.0 { -1.0 } else { 1.0 };
            Ok(PiGrad::from_parts(sign, log_abs, saturated))
        }
        LossKind::SquaredTarget => Err(LossError::UnsupportedKind(spec.kind.token())),
    }
}

/// Symmetric counterpart of [`grad_wrt_pi_l`] via `∂Δ/∂Π_w = +1/Π_w`:
/// equals `d_dlogits · (1/Π_w)`.
pub fn grad_wrt_pi_w(
    spec: &LossSpec,
    pi_w: f64,
    pi_l: f64,
    ref_w: f64,
    ref_l: f64,
) -> Result<PiGrad, LossError> {
    let point = GradPoint::new(spec, pi_w, pi_l, ref_w, ref_l)?;
    let saturated = pi_w <= prob_floor();
    match spec.kind {
        LossKind::Dpo => {
            let log_abs = spec.beta.ln() + log_sigmoid(-point.x) - pi_w.ln();
            Ok(PiGrad::from_parts(-1.0, log_abs, saturated))
        }
        LossKind::Spo => {
            point.check_spo_floor(spec)?;
            if point.x == 1.0 {
                return Ok(PiGrad::from_parts(0.0, f64::NEG_INFINITY, saturated));
            }
            let log_abs = spec.beta.ln() + (point.x - 1.0).abs().ln() - point.x - pi_w.ln();
            let sign = if point.x > 1.0 { 1.0 } else { -1.0 };
            Ok(PiGrad::from_parts(sign, log_abs, saturated))
        }
        LossKind::SquaredTarget => Err(LossError::UnsupportedKind(spec.kind.token())),
    }
}

struct GradPoint {
    x: f64,
}

impl GradPoint {
    fn new(
        spec: &LossSpec,
        pi_w: f64,
        pi_l: f64,
        ref_w: f64,
        ref_l: f64,
    ) -> Result<Self, LossError> {
        spec.validate()?;
        check_prob("pi_w", pi_w)?;
        check_prob("pi_l", pi_l)?;
        check_prob("ref_w", ref_w)?;
        check_prob("ref_l", ref_l)?;
        let logits = (pi_w.ln() - ref_w.ln()) - (pi_l.ln() - ref_l.ln());
        Ok(Self {
            x: spec.beta * logits,
        })
    }

    fn check_spo_floor(&self, spec: &LossSpec) -> Result<(), LossError> {
        if self.x < spec.x_floor {
            return Err(LossError::ExpOverflow {
                x: self.x,
                floor: spec.x_floor,
            });
        }
        Ok(())
    }
}

fn check_prob(what: &'static str, value: f64) -> Result<(), LossError> {
    if !(value.is_finite() && value > 0.0 && value <= 1.0) {
        return Err(LossError::InvalidProbability { what, value });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    const INV_E: f64 = 0.36787944117144233;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    // ---- DPO ----

    #[test]
    fn dpo_at_zero_logits_is_ln2_with_slope_minus_beta_halves() {
        let spec = LossSpec::dpo(0.1).unwrap();
        let e = spec.eval_at(0.0).unwrap();
        assert!((e.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((e.d_dlogits - (-0.05)).abs() < 1e-15);
    }

    #[test]
    fn dpo_saturates_toward_zero_at_large_logits() {
        let spec = LossSpec::dpo(1.0).unwrap();
        let e = spec.eval_at(50.0).unwrap();
        // value = ln(1 + e^-50) = 1.9287e-22
        assert!(e.value > 0.0);
        assert!(e.value < 1e-20);
        assert!(e.d_dlogits < 0.0);
        assert!(e.d_dlogits.abs() < 1e-20);
    }

    #[test]
    fn dpo_hand_point_cross_checked_by_finite_difference() {
        let spec = LossSpec::dpo(0.1).unwrap();
        let e = spec.eval_at(5.0).unwrap();
        assert!((e.value - 0.4740769841801067).abs() < 1e-14);
        assert!((e.d_dlogits - (-0.03775406687981454)).abs() < 1e-14);
        let h = 1e-6;
        let fd = (spec.eval_at(5.0 + h).unwrap().value - spec.eval_at(5.0 - h).unwrap().value)
            / (2.0 * h);
        assert!(rel_err(fd, e.d_dlogits) < 1e-5);
    }

    #[test]
    fn dpo_is_strictly_decreasing_with_negative_derivative() {
        let spec = LossSpec::dpo(0.5).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=400 {
            let logits = -20.0 + i as f64 * 0.1;
            let e = spec.eval_at(logits).unwrap();
            assert!(e.value < prev, "not decreasing at logits={logits}");
            assert!(e.d_dlogits < 0.0);
            prev = e.value;
        }
    }

    // ---- SPO ----

    #[test]
    fn spo_stationary_point_sits_at_x_equals_one() {
        let spec = LossSpec::spo(1.0).unwrap();
        let e = spec.eval_at(1.0).unwrap();
        assert!((e.value - (-INV_E)).abs() < 1e-16);
        assert_eq!(e.d_dlogits, 0.0);
    }

    #[test]
    fn spo_at_zero_logits() {
        for beta in [0.05, 0.1, 1.0, 5.0] {
            let spec = LossSpec::spo(beta).unwrap();
            let e = spec.eval_at(0.0).unwrap();
            assert_eq!(e.value, 0.0);
            assert_eq!(e.d_dlogits, -beta);
        }
    }

    #[test]
    fn spo_hand_point_cross_checked_by_finite_difference() {
        let spec = LossSpec::spo(0.1).unwrap();
        let e = spec.eval_at(5.0).unwrap();
        assert!((e.value - (-0.3032653298563167)).abs() < 1e-14);
        assert!((e.d_dlogits - (-0.03032653298563167)).abs() < 1e-14);
        let h = 1e-6;
        let fd = (spec.eval_at(5.0 + h).unwrap().value - spec.eval_at(5.0 - h).unwrap().value)
            / (2.0 * h);
        assert!(rel_err(fd, e.d_dlogits) < 1e-5);
    }

    #[test]
    fn spo_errors_below_the_exp_floor() {
        let spec = LossSpec::spo(1.0).unwrap();
        assert!(matches!(
            spec.eval_at(-701.0),
            Err(LossError::ExpOverflow { .. })
        ));
        // At the floor itself the value is still a finite double.
        let e = spec.eval_at(-700.0).unwrap();
        assert!(e.value.is_finite() && e.d_dlogits.is_finite());
        // Large beta can overflow the derivative product just above the
        // floor; that is an overflow error too, never a non-finite eval.
        let big = LossSpec::spo(100.0).unwrap();
        assert!(matches!(
            big.eval_at(-7.0),
            Err(LossError::ExpOverflow { .. })
        ));
    }

    #[test]
    fn spo_global_minimum_on_dense_grid() {
        for beta in [0.05, 0.1, 0.5, 1.0, 5.0] {
            let spec = LossSpec::spo(beta).unwrap();
            let at_min = spec.eval_at(1.0 / beta).unwrap().value;
            assert!((at_min - (-INV_E)).abs() < 1e-12, "beta={beta}");
            let n = 7000;
            for i in 0..=n {
                let x = -20.0 + 70.0 * i as f64 / n as f64;
                if (x - 1.0).abs() < 1e-9 {
                    continue;
                }
                let v = spec.eval_at(x / beta).unwrap().value;
                assert!(v > at_min, "beta={beta}, X={x}: {v} <= {at_min}");
            }
        }
    }

    #[test]
    fn spo_penalty_is_asymmetric_around_the_target() {
        let spec = LossSpec::spo(1.0).unwrap();
        // X >= 1: value confined to [-1/e, 0).
        for i in 0..=490 {
            let x = 1.0 + i as f64 * 0.1;
            let v = spec.eval_at(x).unwrap().value;
            assert!((-INV_E - 1e-15..0.0).contains(&v), "X={x}: {v}");
        }
        // X <= 0: value nonnegative and non-increasing in X.
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let x = -20.0 + i as f64 * 0.1; // ends at 0
            let v = spec.eval_at(x).unwrap().value;
            assert!(v >= 0.0, "X={x}");
            if i > 0 {
                assert!(v <= prev, "X={x}: penalty grew");
            }
            prev = v;
        }
    }

    #[test]
    fn spo_value_and_derivative_vanish_under_over_optimization() {
        let spec = LossSpec::spo(1.0).unwrap();
        let e = spec.eval_at(50.0).unwrap();
        assert!(e.value.abs() < 1e-8);
        assert!(e.d_dlogits.abs() < 1e-8);
    }

    // ---- squared target ----

    #[test]
    fn squared_target_zero_at_the_target() {
        let spec = LossSpec::squared_target(1.0, 1.0).unwrap();
        let e = spec.eval_at(1.0).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.d_dlogits, 0.0);
    }

    #[test]
    fn squared_target_hand_points() {
        let spec = LossSpec::squared_target(0.1, 0.0).unwrap();
        let e = spec.eval_at(2.0).unwrap();
        assert_eq!(e.value, 4.0);
        assert_eq!(e.d_dlogits, 4.0);

        let spec = LossSpec::squared_target(0.1, 0.5).unwrap();
        let e = spec.eval_at(3.0).unwrap();
        assert!((e.value - 4.0).abs() < 1e-12);
        assert!((e.d_dlogits - (-4.0)).abs() < 1e-12);
    }

    // ---- spec validation / dispatch ----

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(matches!(LossSpec::dpo(0.0), Err(LossError::InvalidBeta(_))));
        assert!(matches!(
            LossSpec::spo(-1.0),
            Err(LossError::InvalidBeta(_))
        ));
        assert!(matches!(
            LossSpec::squared_target(0.1, f64::NAN),
            Err(LossError::InvalidGap(_))
        ));
    }

    #[test]
    fn eval_helpers_reject_mismatched_kinds() {
        let dpo = LossSpec::dpo(0.1).unwrap();
        assert!(matches!(
            eval_spo(&dpo, LogitsDiff::new(0.0).unwrap()),
            Err(LossError::KindMismatch { .. })
        ));
    }

    // ---- pair-probability gradients ----

    #[test]
    fn dpo_grad_wrt_pi_l_matches_hand_evaluation() {
        // beta=0.1, uniform 2-response reference, pi_w=0.5 and pi_l chosen
        // so the logits difference is exactly 5.
        let spec = LossSpec::dpo(0.1).unwrap();
        let pi_l = 0.5 * (-5.0f64).exp();
        let g = grad_wrt_pi_l(&spec, 0.5, pi_l, 0.5, 0.5).unwrap();
        assert!((g.value - 11.206400669206467).abs() < 1e-9);
        assert!(!g.saturated);
        assert_eq!(g.sign, 1.0);
    }

    #[test]
    fn spo_grad_wrt_pi_l_matches_hand_evaluation() {
        let spec = LossSpec::spo(0.1).unwrap();
        let pi_l = 0.5 * (-5.0f64).exp();
        let g = grad_wrt_pi_l(&spec, 0.5, pi_l, 0.5, 0.5).unwrap();
        assert!((g.value - 9.001713130052181).abs() < 1e-9);
    }

    #[test]
    fn spo_grads_vanish_exactly_at_the_target() {
        let spec = LossSpec::spo(0.5).unwrap();
        // logits = 2 gives X = 1 exactly.
        let pi_l = 0.5 * (-2.0f64).exp();
        let gl = grad_wrt_pi_l(&spec, 0.5, pi_l, 0.5, 0.5).unwrap();
        let gw = grad_wrt_pi_w(&spec, 0.5, pi_l, 0.5, 0.5).unwrap();
        assert_eq!(gl.value, 0.0);
        assert_eq!(gw.value, 0.0);
        assert_eq!(gl.sign, 0.0);
    }

    #[test]
    fn dpo_grad_wrt_pi_w_hand_point() {
        let spec = LossSpec::dpo(1.0).unwrap();
        let g = grad_wrt_pi_w(&spec, 0.25, 0.25, 0.25, 0.25).unwrap();
        assert!((g.value - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn grad_ratio_identity_links_pi_w_and_pi_l() {
        // For any loss of the logits difference,
        // grad_pi_w = -grad_pi_l * (pi_l / pi_w).
        let spec = LossSpec::dpo(0.3).unwrap();
        let mut rng = CounterRng::new(5);
        for _ in 0..200 {
            let pi_w = 0.05 + 0.9 * rng.next_f64();
            let pi_l = 0.05 + 0.9 * rng.next_f64();
            let gl = grad_wrt_pi_l(&spec, pi_w, pi_l, 0.5, 0.5).unwrap().value;
            let gw = grad_wrt_pi_w(&spec, pi_w, pi_l, 0.5, 0.5).unwrap().value;
            assert!(rel_err(gw, -gl * pi_l / pi_w) < 1e-12);
        }
    }

    #[test]
    fn grads_reject_invalid_probabilities_and_kinds() {
        let spec = LossSpec::dpo(0.1).unwrap();
        assert!(matches!(
            grad_wrt_pi_l(&spec, 0.5, 0.0, 0.5, 0.5),
            Err(LossError::InvalidProbability { .. })
        ));
        assert!(matches!(
            grad_wrt_pi_l(&spec, 1.5, 0.5, 0.5, 0.5),
            Err(LossError::InvalidProbability { .. })
        ));
        let sq = LossSpec::squared_target(0.1, 0.0).unwrap();
        assert!(matches!(
            grad_wrt_pi_l(&sq, 0.5, 0.5, 0.5, 0.5),
            Err(LossError::UnsupportedKind(_))
        ));
    }

    #[test]
    fn saturated_points_still_report_log_magnitude() {
        let spec = LossSpec::dpo(0.01).unwrap();
        let pi_l = prob_floor();
        let g = grad_wrt_pi_l(&spec, 0.5, pi_l, 0.5, 0.5).unwrap();
        assert!(g.saturated);
        assert!(g.log_abs.is_finite());
    }

    #[test]
    fn chain_rule_consistency_between_routes() {
        // grad_wrt_pi_l must equal d_dlogits * (-1/pi_l) at 1,000 points.
        let mut rng = CounterRng::new(17);
        for i in 0..1000 {
            let beta = [0.05, 0.1, 0.5, 1.0, 5.0][i % 5];
            let pi_w = 1e-5 + (1.0 - 1e-5) * rng.next_f64();
            let pi_l = 1e-5 + (1.0 - 1e-5) * rng.next_f64();
            let ref_w = 1e-3 + 0.997 * rng.next_f64();
            let ref_l = 1e-3 + 0.997 * rng.next_f64();
            let logits = (pi_w / ref_w).ln() - (pi_l / ref_l).ln();
            for spec in [LossSpec::dpo(beta).unwrap(), LossSpec::spo(beta).unwrap()] {
                let direct = grad_wrt_pi_l(&spec, pi_w, pi_l, ref_w, ref_l)
                    .unwrap()
                    .value;
                let chained = spec.eval_at(logits).unwrap().d_dlogits * (-1.0 / pi_l);
                assert!(
                    rel_err(direct, chained) < 1e-10,
                    "{:?} beta={beta} pi_l={pi_l}: {direct} vs {chained}",
                    spec.kind
                );
                let direct_w = grad_wrt_pi_w(&spec, pi_w, pi_l, ref_w, ref_l)
                    .unwrap()
                    .value;
                let chained_w = spec.eval_at(logits).unwrap().d_dlogits * (1.0 / pi_w);
                assert!(rel_err(direct_w, chained_w) < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_ratio_of_the_two_losses_at_large_x() {
        // (dSPO/dX) / |dDPO/dX| = (X-1)(1+e^{-X}): the algebraic ratio of
        // the two derivative expressions. Its growth with X is recorded by
        // the sweep experiment, not asserted against any external claim.
        for i in 0..=280 {
            let x = 2.0 + i as f64 * 0.1;
            let spo = LossSpec::spo(1.0).unwrap().eval_at(x).unwrap().d_dlogits;
            let dpo = LossSpec::dpo(1.0).unwrap().eval_at(x).unwrap().d_dlogits;
            let ratio = spo / dpo.abs();
            let expected = (x - 1.0) * (1.0 + (-x).exp());
            assert!(
                rel_err(ratio, expected) < 1e-8,
                "X={x}: {ratio} vs {expected}"
            );
        }
    }

    proptest! {
        #[test]
        fn dpo_value_positive_derivative_negative(beta in 0.01f64..10.0, logits in -50.0f64..50.0) {
            let e = LossSpec::dpo(beta).unwrap().eval_at(logits).unwrap();
            prop_assert!(e.value > 0.0);
            prop_assert!(e.d_dlogits < 0.0);
        }

        #[test]
        fn spo_never_dips_below_its_minimum(beta in 0.01f64..10.0, logits in -60.0f64..60.0) {
            let e = LossSpec::spo(beta).unwrap().eval_at(logits).unwrap();
            prop_assert!(e.value >= -INV_E - 1e-15);
        }
    }
}
