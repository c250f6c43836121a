//! Experiment engines behind the CLI: loss curves, gradient-magnitude
//! sweeps with power-law fits, oracle verification, and the reward-hacking
//! probe. Each engine returns plain row structs; the CLI owns file layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    designated_pairs, gen_instance, DatagenError, Instance, InstanceSpec, PreferenceDataset,
};
use crate::fmt::{bool_csv, f64_csv};
use crate::losses::{grad_wrt_pi_l, LossError, LossEval, LossSpec};
use crate::oracle::{
    all_ordered_pairs, log_partition, optimal_policy, optimality_residuals, rlhf_objective,
    OracleError,
};
use crate::policy::{LinearFeaturePolicy, PolicyError, ReferencePolicy};
use crate::rng::{streams, CounterRng};
use crate::trainer::{train, RunRecord, TrainConfig, TrainError};
use crate::types::LogProbTable;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Core(#[from] crate::types::CoreError),
}

// ---------------------------------------------------------------------------
// Loss curves
// ---------------------------------------------------------------------------

/// One `(loss, beta, logits)` cell of a loss curve. `eval` is `None` where
/// the evaluation overflowed; such points are flagged, not dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCurvePoint {
    pub spec: LossSpec,
    pub logits: f64,
    pub eval: Option<LossEval>,
}

impl LossCurvePoint {
    pub const CSV_HEADER: &'static str = "loss_kind,beta,logits,value,d_dlogits,flag";

    pub fn csv_row(&self) -> String {
        match self.eval {
            Some(e) => format!(
                "{},{},{},{},{},ok",
                self.spec.kind,
                f64_csv(self.spec.beta),
                f64_csv(self.logits),
                f64_csv(e.value),
                f64_csv(e.d_dlogits)
            ),
            None => format!(
                "{},{},{},,,overflow",
                self.spec.kind,
                f64_csv(self.spec.beta),
                f64_csv(self.logits)
            ),
        }
    }
}

/// Evaluates every spec over the logits grid.
pub fn loss_curve(
    specs: &[LossSpec],
    grid: &[f64],
) -> Result<Vec<LossCurvePoint>, ExperimentError> {
    if specs.is_empty() || grid.is_empty() {
        return Err(ExperimentError::Config(
            "loss curve needs at least one spec and one grid point".into(),
        ));
    }
    let mut points = Vec::with_capacity(specs.len() * grid.len());
    for spec in specs {
        for &logits in grid {
            let eval = match spec.eval_at(logits) {
                Ok(e) => Some(e),
                Err(LossError::ExpOverflow { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            points.push(LossCurvePoint {
                spec: *spec,
                logits,
                eval,
            });
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Gradient-magnitude sweep
// ---------------------------------------------------------------------------

/// Fixed quantities the sweep holds while `Π_l` walks its grid.
///
/// The defaults describe a pair the policy has already learned far beyond
/// its target: the winner's probability sits well above its reference value
/// (`pi_w/ref_w = 5·10^4`). They are chosen, by working the closed forms,
/// so that the asymptotic power law in `Π_l` is already resolvable inside
/// the default fit window `Π_l ≤ 1e-6`; with a neutral anchor
/// (`logits ≈ −ln Π_l`) the slow logarithmic factor in the damped loss
/// still bends the fitted slope noticeably at `β = 0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOperatingPoint {
    pub pi_w: f64,
    pub ref_w: f64,
    pub ref_l: f64,
}

impl Default for SweepOperatingPoint {
    fn default() -> Self {
        Self {
            pi_w: 0.5,
            ref_w: 1e-5,
            ref_l: 0.5,
        }
    }
}

/// One sweep cell: the gradient magnitude of the loss with respect to
/// `Π_l`, in both plain and log form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub spec: LossSpec,
    pub pi_l: f64,
    pub logits: f64,
    pub abs_grad_pi_l: f64,
    pub log_abs_grad_pi_l: f64,
    pub saturated: bool,
}

impl SweepPoint {
    pub const CSV_HEADER: &'static str =
        "loss_kind,beta,pi_l,logits,abs_grad_pi_l,log_abs_grad_pi_l,saturated";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.spec.kind,
            f64_csv(self.spec.beta),
            f64_csv(self.pi_l),
            f64_csv(self.logits),
            f64_csv(self.abs_grad_pi_l),
            f64_csv(self.log_abs_grad_pi_l),
            bool_csv(self.saturated)
        )
    }
}

/// Least-squares line through `log |grad|` versus `log Π_l` over the
/// asymptotic sub-grid. Slow corrections on top of the pure power law
/// (the damped loss carries a `ln(1/Π_l)` factor) show up as curvature
/// in the per-point rows rather than in this summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub kind: crate::losses::LossKind,
    pub beta: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n_points: usize,
    pub pi_l_fit_max: f64,
}

impl PowerLawFit {
    pub const CSV_HEADER: &'static str = "loss_kind,beta,slope,intercept,n_points,pi_l_fit_max";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.kind,
            f64_csv(self.beta),
            f64_csv(self.slope),
            f64_csv(self.intercept),
            self.n_points,
            f64_csv(self.pi_l_fit_max)
        )
    }
}

/// Log-spaced grid including both endpoints.
pub fn log_spaced_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2 && min > 0.0 && max > min);
    let (lo, hi) = (min.ln(), max.ln());
    (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Sweeps `|∂L/∂Π_l|` over a `Π_l` grid at a fixed operating point and fits
/// the asymptotic power law over points with `Π_l ≤ fit_max`. Saturated
/// points are flagged and excluded from the fit.
pub fn grad_sweep(
    specs: &[LossSpec],
    operating_point: &SweepOperatingPoint,
    pi_l_grid: &[f64],
    fit_max: f64,
) -> Result<(Vec<SweepPoint>, Vec<PowerLawFit>), ExperimentError> {
    if specs.is_empty() || pi_l_grid.is_empty() {
        return Err(ExperimentError::Config(
            "gradient sweep needs at least one spec and one grid point".into(),
        ));
    }
    let op = operating_point;
    for (name, v) in [("pi_w", op.pi_w), ("ref_w", op.ref_w), ("ref_l", op.ref_l)] {
        if !(v.is_finite() && v > 0.0 && v <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "operating point {name} must lie in (0, 1], got {v}"
            )));
        }
    }
    let mut points = Vec::with_capacity(specs.len() * pi_l_grid.len());
    let mut fits = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut fit_xs = Vec::new();
        let mut fit_ys = Vec::new();
        for &pi_l in pi_l_grid {
            if !(pi_l > 0.0 && pi_l <= 1.0) {
                return Err(ExperimentError::Config(format!(
                    "pi_l grid value {pi_l} outside (0, 1]"
                )));
            }
            let grad = grad_wrt_pi_l(spec, op.pi_w, pi_l, op.ref_w, op.ref_l)?;
            let logits = (op.pi_w / op.ref_w).ln() - (pi_l / op.ref_l).ln();
            if pi_l <= fit_max && !grad.saturated && grad.log_abs.is_finite() {
                fit_xs.push(pi_l.ln());
                fit_ys.push(grad.log_abs);
            }
            points.push(SweepPoint {
                spec: *spec,
                pi_l,
                logits,
                abs_grad_pi_l: grad.value.abs(),
                log_abs_grad_pi_l: grad.log_abs,
                saturated: grad.saturated,
            });
        }
        if fit_xs.len() < 2 {
            return Err(ExperimentError::Config(format!(
                "fewer than 2 usable fit points below pi_l = {fit_max} for {} beta {}",
                spec.kind, spec.beta
            )));
        }
        let (slope, intercept) = least_squares(&fit_xs, &fit_ys);
        fits.push(PowerLawFit {
            kind: spec.kind,
            beta: spec.beta,
            slope,
            intercept,
            n_points: fit_xs.len(),
            pi_l_fit_max: fit_max,
        });
    }
    Ok((points, fits))
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    let slope = num / den;
    (slope, my - slope * mx)
}

// ---------------------------------------------------------------------------
// Oracle check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckConfig {
    pub instance: InstanceSpec,
    pub beta: f64,
    pub perturbations: usize,
    pub tolerance: f64,
}

/// Verification report for the closed-form optimum on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub beta: f64,
    pub tolerance: f64,
    /// Max over `(x,y)` of `|β(log π* − log π_ref) − r + β·ln Z(x)|`: how
    /// far the reward-to-policy identity is from holding exactly.
    pub max_identity_residual: f64,
    /// Max over ordered pairs of `|logits(π*) − (r_w − r_l)/β|`.
    pub max_optimality_residual: f64,
    pub objective_at_optimum: f64,
    /// `|objective(π*) − β·mean_x ln Z(x)|`.
    pub closed_form_gap: f64,
    pub perturbations: usize,
    /// Perturbed policies that scored at least as high as the optimum.
    pub dominance_failures: usize,
    pub passed: bool,
}

/// Verifies the optimal-policy identities on a generated instance and
/// checks that `perturbations` random neighbors all score strictly below
/// the optimum.
pub fn oracle_check(config: &OracleCheckConfig) -> Result<OracleCheckReport, ExperimentError> {
    if !(config.tolerance.is_finite() && config.tolerance > 0.0) {
        return Err(ExperimentError::Config(format!(
            "tolerance must be positive, got {}",
            config.tolerance
        )));
    }
    let instance = gen_instance(&config.instance)?;
    let reward = &instance.reward;
    let reference = &instance.reference;
    let beta = config.beta;

    let optimum = optimal_policy(reward, reference, beta)?;
    let lnz = log_partition(reward, reference, beta)?;

    let mut max_identity = 0.0f64;
    for (p, row) in optimum.rows().iter().enumerate() {
        for (r, lp) in row.iter().enumerate() {
            let lref = reference.table().rows()[p][r];
            let reward_value = reward.rows()[p][r];
            let residual = beta * (lp - lref) - reward_value + beta * lnz[p];
            max_identity = max_identity.max(residual.abs());
        }
    }

    let pairs = all_ordered_pairs(reward);
    let residuals = optimality_residuals(&optimum, reference, reward, beta, &pairs)?;
    let max_optimality = residuals
        .iter()
        .map(|r| r.value.abs())
        .fold(0.0f64, f64::max);

    let objective_at_optimum = rlhf_objective(&optimum, reward, reference, beta)?;
    let closed_form = beta * lnz.iter().sum::<f64>() / lnz.len() as f64;
    let closed_form_gap = (objective_at_optimum - closed_form).abs();

    let mut rng = CounterRng::stream(config.instance.seed, streams::PERTURB);
    let mut dominance_failures = 0usize;
    for _ in 0..config.perturbations {
        let scale = 0.01 * 100f64.powf(rng.next_f64()); // log-uniform on [0.01, 1]
        let rows: Vec<Vec<f64>> = optimum
            .rows()
            .iter()
            .map(|row| {
                let scores: Vec<f64> = row
                    .iter()
                    .map(|lp| lp + scale * rng.next_symmetric())
                    .collect();
                crate::policy::log_softmax_row(&scores)
            })
            .collect();
        let perturbed = LogProbTable::new(rows)?;
        let value = rlhf_objective(&perturbed, reward, reference, beta)?;
        if value >= objective_at_optimum {
            dominance_failures += 1;
        }
    }

    let passed = max_identity <= config.tolerance
        && max_optimality <= config.tolerance
        && closed_form_gap <= config.tolerance
        && dominance_failures == 0;

    Ok(OracleCheckReport {
        beta,
        tolerance: config.tolerance,
        max_identity_residual: max_identity,
        max_optimality_residual: max_optimality,
        objective_at_optimum,
        closed_form_gap,
        perturbations: config.perturbations,
        dominance_failures,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Reward-hacking probe
// ---------------------------------------------------------------------------

/// Probe configuration: a feature instance (collision set per run), the
/// losses to compare, and the shared SGD budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub instance: InstanceSpec,
    pub losses: Vec<LossSpec>,
    pub learning_rate: f64,
    pub steps: usize,
    pub log_every: usize,
}

/// One probe row, tracking the designated pair of one prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub kind: crate::losses::LossKind,
    pub step: usize,
    pub pi_w: f64,
    pub pi_l: f64,
    pub pi_w_plus_pi_l: f64,
    pub logits: f64,
}

impl ProbeRow {
    pub const CSV_HEADER: &'static str = "loss_kind,step,pi_w,pi_l,pi_w_plus_pi_l,logits";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.kind,
            self.step,
            f64_csv(self.pi_w),
            f64_csv(self.pi_l),
            f64_csv(self.pi_w_plus_pi_l),
            f64_csv(self.logits)
        )
    }

    fn from_record(kind: crate::losses::LossKind, r: &RunRecord) -> Self {
        Self {
            kind,
            step: r.step,
            pi_w: r.pi_w,
            pi_l: r.pi_l,
            pi_w_plus_pi_l: r.pi_w + r.pi_l,
            logits: r.logits,
        }
    }
}

/// Trajectories of one loss on the probe instance.
#[derive(Debug, Clone)]
pub struct ProbeTrajectory {
    pub loss: LossSpec,
    pub collision: f64,
    pub rows: Vec<ProbeRow>,
}

/// Trains a linear-feature policy on each prompt's designated pair
/// `(0 ≻ 1)` under every loss in the config, with identical seeds and
/// initialization, and returns the per-step trajectories.
pub fn hack_probe(config: &ProbeConfig) -> Result<Vec<ProbeTrajectory>, ExperimentError> {
    if config.instance.feature_dim.is_none() {
        return Err(ExperimentError::Config(
            "the probe needs a feature instance; set feature_dim".into(),
        ));
    }
    if config.losses.is_empty() {
        return Err(ExperimentError::Config("no losses configured".into()));
    }
    let instance: Instance = gen_instance(&config.instance)?;
    let features = instance
        .features
        .as_ref()
        .expect("feature_dim was validated above");
    let dataset = PreferenceDataset::manual(
        designated_pairs(config.instance.n_prompts),
        config.instance.n_prompts,
        config.instance.n_responses,
    )?;

    let mut trajectories = Vec::with_capacity(config.losses.len());
    for loss in &config.losses {
        let policy = LinearFeaturePolicy::zeroed(features.vectors.clone(), features.dim)?;
        let reference = ReferencePolicy::from_policy(&policy)?;
        let train_config = TrainConfig::full_batch_sgd(
            *loss,
            config.learning_rate,
            config.steps,
            config.log_every,
        );
        let outcome = train(&policy, &reference, &dataset, &train_config)?;
        let rows = outcome
            .records
            .iter()
            .map(|r| ProbeRow::from_record(loss.kind, r))
            .collect();
        trajectories.push(ProbeTrajectory {
            loss: *loss,
            collision: config.instance.feature_collision,
            rows,
        });
    }
    Ok(trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;

    fn linear_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
        crate::gradcheck::linear_grid(min, max, points)
    }

    #[test]
    fn loss_curve_minimum_sits_at_the_scaled_target() {
        let grid = linear_grid(-20.0, 50.0, 701);
        for beta in [0.1, 0.5, 1.0] {
            let specs = [LossSpec::spo(beta).unwrap()];
            let points = loss_curve(&specs, &grid).unwrap();
            let argmin = points
                .iter()
                .filter(|p| p.eval.is_some())
                .min_by(|a, b| {
                    a.eval
                        .unwrap()
                        .value
                        .partial_cmp(&b.eval.unwrap().value)
                        .unwrap()
                })
                .unwrap();
            let step = 70.0 / 700.0;
            assert!(
                (argmin.logits - 1.0 / beta).abs() <= step + 1e-9,
                "beta={beta}: argmin at {}",
                argmin.logits
            );
        }
    }

    #[test]
    fn loss_curve_spo_row_at_the_target_has_min_value_and_zero_slope() {
        let spec = LossSpec::spo(0.5).unwrap();
        let points = loss_curve(&[spec], &[2.0]).unwrap();
        let e = points[0].eval.unwrap();
        assert!((e.value - (-0.36787944117144233)).abs() < 1e-12);
        assert_eq!(e.d_dlogits, 0.0);
    }

    #[test]
    fn loss_curve_dpo_rows_strictly_decrease() {
        let spec = LossSpec::dpo(0.5).unwrap();
        let grid = linear_grid(-10.0, 10.0, 101);
        let points = loss_curve(&[spec], &grid).unwrap();
        for window in points.windows(2) {
            assert!(window[1].eval.unwrap().value < window[0].eval.unwrap().value);
        }
    }

    #[test]
    fn loss_curve_flags_overflow_instead_of_dropping_rows() {
        let spec = LossSpec::spo(1.0).unwrap();
        let points = loss_curve(&[spec], &[-800.0, 0.0]).unwrap();
        assert_eq!(points.len(), 2);
        assert!(points[0].eval.is_none());
        assert!(points[0].csv_row().ends_with("overflow"));
        assert!(points[1].eval.is_some());
    }

    #[test]
    fn sweep_slopes_recover_the_derived_exponents() {
        // Expected values worked out from the closed forms at the default
        // operating point before running; see SweepOperatingPoint docs.
        let grid = log_spaced_grid(1e-8, 0.5, 60);
        let op = SweepOperatingPoint::default();
        for beta in [0.1, 0.5, 1.0] {
            let specs = [LossSpec::dpo(beta).unwrap(), LossSpec::spo(beta).unwrap()];
            let (_, fits) = grad_sweep(&specs, &op, &grid, 1e-6).unwrap();
            let dpo = fits.iter().find(|f| f.kind == LossKind::Dpo).unwrap();
            let spo = fits.iter().find(|f| f.kind == LossKind::Spo).unwrap();
            assert!(
                (dpo.slope - (beta - 1.0)).abs() <= 0.05,
                "dpo beta={beta}: slope {}",
                dpo.slope
            );
            assert!(
                (spo.slope - (beta - 1.0)).abs() <= 0.15,
                "spo beta={beta}: slope {}",
                spo.slope
            );
        }
    }

    #[test]
    fn sweep_wide_window_example_for_small_beta() {
        let grid = log_spaced_grid(1e-8, 0.5, 60);
        let op = SweepOperatingPoint::default();
        let (_, fits) = grad_sweep(&[LossSpec::dpo(0.1).unwrap()], &op, &grid, 1e-3).unwrap();
        assert!((fits[0].slope - (-0.9)).abs() <= 0.05, "{}", fits[0].slope);
    }

    #[test]
    fn sweep_residuals_show_the_logarithmic_correction() {
        // After removing the pure power law (beta-1)·ln pi_l, the damped
        // loss's remaining log magnitude keeps growing as pi_l shrinks; the
        // log-sigmoid loss's barely moves.
        let grid = log_spaced_grid(1e-8, 1e-6, 16);
        let op = SweepOperatingPoint::default();
        let beta = 0.1;
        let drift = |spec: LossSpec| {
            let (points, _) = grad_sweep(&[spec], &op, &grid, 1e-6).unwrap();
            let z = |p: &SweepPoint| p.log_abs_grad_pi_l - (beta - 1.0) * p.pi_l.ln();
            z(points.first().unwrap()) - z(points.last().unwrap())
        };
        let spo_drift = drift(LossSpec::spo(beta).unwrap());
        let dpo_drift = drift(LossSpec::dpo(beta).unwrap());
        assert!(spo_drift > 0.0);
        assert!(spo_drift > dpo_drift);
    }

    #[test]
    fn sweep_excludes_saturated_points_from_the_fit() {
        let spec = LossSpec::dpo(0.5).unwrap();
        let floor = crate::types::prob_floor();
        let grid = vec![floor, 1e-8, 1e-7, 1e-6];
        let op = SweepOperatingPoint::default();
        let (points, fits) = grad_sweep(&[spec], &op, &grid, 1e-6).unwrap();
        assert!(points[0].saturated);
        assert_eq!(fits[0].n_points, 3);
    }

    #[test]
    fn oracle_check_passes_on_generated_instances() {
        let config = OracleCheckConfig {
            instance: InstanceSpec {
                n_prompts: 4,
                n_responses: 8,
                reward_scale: 1.0,
                seed: 3,
                feature_dim: None,
                feature_collision: 0.0,
            },
            beta: 1.0,
            perturbations: 200,
            tolerance: 1e-10,
        };
        let report = oracle_check(&config).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_identity_residual < 1e-10);
        assert!(report.max_optimality_residual < 1e-10);
        assert!(report.closed_form_gap < 1e-10);
        assert_eq!(report.dominance_failures, 0);
    }

    #[test]
    fn oracle_check_on_constant_rewards_is_exact() {
        let config = OracleCheckConfig {
            instance: InstanceSpec {
                n_prompts: 2,
                n_responses: 4,
                reward_scale: 0.0,
                seed: 1,
                feature_dim: None,
                feature_collision: 0.0,
            },
            beta: 1.0,
            perturbations: 100,
            tolerance: 1e-10,
        };
        let report = oracle_check(&config).unwrap();
        assert!(report.passed);
        // pi* = pi_ref exactly: residuals are pure rounding.
        assert!(report.max_identity_residual < 1e-14);
    }

    #[test]
    fn oracle_check_overflow_is_a_clean_error() {
        let config = OracleCheckConfig {
            instance: InstanceSpec {
                n_prompts: 2,
                n_responses: 4,
                reward_scale: 1.0,
                seed: 5,
                feature_dim: None,
                feature_collision: 0.0,
            },
            beta: 1e-3,
            perturbations: 10,
            tolerance: 1e-10,
        };
        match oracle_check(&config) {
            Err(ExperimentError::Oracle(OracleError::ExpOverflow { .. })) => {}
            other => panic!("expected a clean overflow, got {other:?}"),
        }
    }

    fn probe_config(collision: f64, losses: Vec<LossSpec>) -> ProbeConfig {
        ProbeConfig {
            instance: InstanceSpec {
                n_prompts: 1,
                n_responses: 3,
                reward_scale: 1.0,
                seed: 19,
                feature_dim: Some(2),
                feature_collision: collision,
            },
            losses,
            learning_rate: 0.05,
            steps: 1500,
            log_every: 10,
        }
    }

    #[test]
    fn probe_without_collision_behaves_like_tabular() {
        let config = probe_config(
            0.0,
            vec![LossSpec::dpo(0.1).unwrap(), LossSpec::spo(0.1).unwrap()],
        );
        let trajectories = hack_probe(&config).unwrap();
        for t in &trajectories {
            let warmup = config.steps / 10;
            let mut prev = f64::NEG_INFINITY;
            for row in t.rows.iter().filter(|r| r.step >= warmup) {
                assert!(
                    row.pi_w >= prev - 1e-12,
                    "{} step {}: pi_w dipped {} -> {}",
                    t.loss.kind,
                    row.step,
                    prev,
                    row.pi_w
                );
                prev = row.pi_w;
            }
            assert!(t.rows.iter().all(|r| r.pi_w.is_finite()));
        }
    }

    #[test]
    fn probe_with_full_collision_freezes_the_pair_ratio() {
        let config = probe_config(
            1.0,
            vec![LossSpec::dpo(0.1).unwrap(), LossSpec::spo(0.1).unwrap()],
        );
        let trajectories = hack_probe(&config).unwrap();
        for t in &trajectories {
            let first = &t.rows[0];
            let ratio0 = (first.pi_w / first.pi_l).ln();
            for row in &t.rows {
                let ratio = (row.pi_w / row.pi_l).ln();
                assert!(
                    (ratio - ratio0).abs() <= 1e-10,
                    "{} step {}: ratio moved",
                    t.loss.kind,
                    row.step
                );
            }
        }
    }

    #[test]
    fn probe_step_zero_rows_are_identical_across_losses() {
        let config = probe_config(
            0.5,
            vec![LossSpec::dpo(0.1).unwrap(), LossSpec::spo(0.1).unwrap()],
        );
        let trajectories = hack_probe(&config).unwrap();
        let a = &trajectories[0].rows[0];
        let b = &trajectories[1].rows[0];
        assert_eq!(a.step, 0);
        assert_eq!((a.pi_w, a.pi_l, a.logits), (b.pi_w, b.pi_l, b.logits));
    }

    #[test]
    fn probe_requires_a_feature_instance() {
        let mut config = probe_config(0.0, vec![LossSpec::dpo(0.1).unwrap()]);
        config.instance.feature_dim = None;
        assert!(matches!(
            hack_probe(&config),
            Err(ExperimentError::Config(_))
        ));
    }
}
