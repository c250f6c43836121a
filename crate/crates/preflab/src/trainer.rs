//! Deterministic optimization loop over preference pairs.
//!
//! The batch objective is the mean loss over the batch's pairs; its
//! parameter gradient is assembled by the chain rule,
//! `mean_pairs d_dlogits · (∂logπ(y_w)/∂θ − ∂logπ(y_l)/∂θ)`. Training is
//! strictly sequential and a pure function of its inputs: identical policy,
//! dataset, and config produce bit-identical record streams.
//!
//! Logged records are snapshots of the policy *after* the given number of
//! updates; `mean_loss` and `grad_norm_params` in a record are recomputed
//! on the full dataset at that state so each row is self-consistent. The
//! step-0 row is the initialization snapshot. Non-finite losses or
//! gradients abort the run with the offending step and pair; instability is
//! a measured outcome, not noise to suppress.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::PreferenceDataset;
use crate::fmt::{bool_csv, f64_csv};
use crate::losses::{grad_wrt_pi_l, grad_wrt_pi_w, LossError, LossKind, LossSpec};
use crate::policy::{PolicyError, PolicyView, ReferencePolicy};
use crate::rng::{streams, CounterRng};
use crate::types::{logits_diff, pair_probs, CoreError, LogProbTable, PreferencePair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset has no pairs")]
    EmptyDataset,
    #[error(
        "non-finite {what} at step {step} on pair {pair_index} \
         (prompt {prompt}, winner {winner}, loser {loser})"
    )]
    NonFinite {
        step: usize,
        pair_index: usize,
        prompt: usize,
        winner: usize,
        loser: usize,
        what: String,
    },
    #[error("pair {pair_index} is not covered by the policy: {source}")]
    PairOutOfRange {
        pair_index: usize,
        source: CoreError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Which optimizer drives the updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    /// Adam with the conventional defaults.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Full batch by default; minibatches draw `size` indices per step (with
/// replacement) from a seeded stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    Minibatch { size: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: BatchMode,
    pub log_every: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Full-batch SGD, the default regime: the loss geometry is the object
    /// under study, not stochastic optimization.
    pub fn full_batch_sgd(
        loss: LossSpec,
        learning_rate: f64,
        steps: usize,
        log_every: usize,
    ) -> Self {
        Self {
            loss,
            optimizer: OptimizerKind::Sgd,
            learning_rate,
            steps,
            batch: BatchMode::Full,
            log_every,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if self.steps < 1 {
            return Err(TrainError::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.log_every < 1 {
            return Err(TrainError::InvalidConfig("log_every must be >= 1".into()));
        }
        if let BatchMode::Minibatch { size, .. } = self.batch {
            if size < 1 {
                return Err(TrainError::InvalidConfig(
                    "minibatch size must be >= 1".into(),
                ));
            }
        }
        if let Some(clip) = self.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "grad_clip must be positive, got {clip}"
                )));
            }
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.optimizer
        {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
                return Err(TrainError::InvalidConfig(
                    "adam requires beta1, beta2 in [0,1) and epsilon > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Adam moments plus step count. The update is a pure function of
/// `(state, gradient, learning rate)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam step. Returns the new state and the update
/// vector to *subtract* from the parameters.
pub fn adam_step(
    state: &AdamState,
    grad: &[f64],
    learning_rate: f64,
) -> Result<(AdamState, Vec<f64>), TrainError> {
    if grad.len() != state.m.len() {
        return Err(TrainError::InvalidConfig(format!(
            "gradient length {} does not match moment length {}",
            grad.len(),
            state.m.len()
        )));
    }
    let mut next = state.clone();
    next.t = state.t + 1;
    let t = next.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut update = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        update[i] = learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok((next, update))
}

/// One logged row: the state of one tracked pair at one step, plus the
/// batch-level loss and gradient norm at that state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub mean_loss: f64,
    pub pair_id: usize,
    pub logits: f64,
    pub beta_logits: f64,
    pub pi_w: f64,
    pub pi_l: f64,
    pub grad_pi_l: f64,
    pub grad_pi_w: f64,
    pub grad_norm_params: f64,
    pub saturated: bool,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "step,mean_loss,pair_id,logits,beta_logits,pi_w,pi_l,\
                                          grad_pi_l,grad_pi_w,grad_norm_params,saturated_flag";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            f64_csv(self.mean_loss),
            self.pair_id,
            f64_csv(self.logits),
            f64_csv(self.beta_logits),
            f64_csv(self.pi_w),
            f64_csv(self.pi_l),
            f64_csv(self.grad_pi_l),
            f64_csv(self.grad_pi_w),
            f64_csv(self.grad_norm_params),
            bool_csv(self.saturated)
        )
    }
}

/// Per-pair quantities the loss analysis is about, at one policy state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDiagnostics {
    pub logits: f64,
    pub beta_logits: f64,
    pub pi_w: f64,
    pub pi_l: f64,
    pub grad_pi_l: f64,
    pub grad_pi_w: f64,
    pub saturated: bool,
}

/// Fills the diagnostic quantities for one pair from the closed forms.
pub fn track_pair_diagnostics(
    policy_table: &LogProbTable,
    reference: &ReferencePolicy,
    loss: &LossSpec,
    pair: &PreferencePair,
) -> Result<PairDiagnostics, TrainError> {
    let logits = logits_diff(policy_table, reference.table(), pair)?;
    let (pi_w, pi_l) = pair_probs(policy_table, pair)?;
    let (rw, rl) = pair_probs(reference.table(), pair)?;
    let (grad_pi_l, grad_pi_w, saturated) = match loss.kind {
        LossKind::Dpo | LossKind::Spo => {
            let gl = grad_wrt_pi_l(loss, pi_w, pi_l, rw, rl)?;
            let gw = grad_wrt_pi_w(loss, pi_w, pi_l, rw, rl)?;
            (gl.value, gw.value, gl.saturated || gw.saturated)
        }
        LossKind::SquaredTarget => {
            let d = loss.eval(logits)?.d_dlogits;
            let floor = crate::types::prob_floor();
            (
                d * (-1.0 / pi_l),
                d * (1.0 / pi_w),
                pi_l <= floor || pi_w <= floor,
            )
        }
    };
    Ok(PairDiagnostics {
        logits: logits.value(),
        beta_logits: loss.beta * logits.value(),
        pi_w,
        pi_l,
        grad_pi_l,
        grad_pi_w,
        saturated,
    })
}

/// Final policy plus the logged record stream.
#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub policy: P,
    pub records: Vec<RunRecord>,
}

/// Mean loss and parameter gradient of the mean loss over `pairs` at the
/// policy state `table`/`policy`.
fn batch_eval<P: PolicyView>(
    policy: &P,
    table: &LogProbTable,
    reference: &ReferencePolicy,
    loss: &LossSpec,
    pairs: &[(usize, PreferencePair)],
    step: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut grad = vec![0.0; policy.param_count()];
    let mut loss_sum = 0.0;
    for &(pair_index, pair) in pairs {
        let nonfinite = |what: &str| TrainError::NonFinite {
            step,
            pair_index,
            prompt: pair.prompt.0,
            winner: pair.winner.0,
            loser: pair.loser.0,
            what: what.to_string(),
        };
        let logits = logits_diff(table, reference.table(), &pair)?;
        let eval = loss.eval(logits)?;
        if !eval.value.is_finite() {
            return Err(nonfinite("loss value"));
        }
        if !eval.d_dlogits.is_finite() {
            return Err(nonfinite("loss derivative"));
        }
        loss_sum += eval.value;
        let dw = policy.dlogprob_dparams(pair.prompt, pair.winner)?;
        let dl = policy.dlogprob_dparams(pair.prompt, pair.loser)?;
        for i in 0..grad.len() {
            let contribution = eval.d_dlogits * (dw[i] - dl[i]);
            if !contribution.is_finite() {
                return Err(nonfinite("parameter gradient"));
            }
            grad[i] += contribution;
        }
    }
    let n = pairs.len() as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((loss_sum / n, grad))
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clips in place; returns the reported norm, `min(raw, clip)`.
fn clip_gradient(grad: &mut [f64], clip: Option<f64>) -> f64 {
    let norm = l2_norm(grad);
    match clip {
        Some(c) if norm > c => {
            let scale = c / norm;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            c
        }
        _ => norm,
    }
}

enum OptState {
    Sgd,
    Adam(AdamState),
}

/// Runs exactly `config.steps` updates of `config.loss` over `dataset`.
pub fn train<P: PolicyView + Clone>(
    policy: &P,
    reference: &ReferencePolicy,
    dataset: &PreferenceDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<P>, TrainError> {
    config.validate()?;
    if dataset.pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let table0 = policy.log_probs()?;
    for (pair_index, pair) in dataset.pairs.iter().enumerate() {
        if !table0.contains(pair) || !reference.table().contains(pair) {
            return Err(TrainError::PairOutOfRange {
                pair_index,
                source: CoreError::MissingId {
                    prompt: pair.prompt.0,
                    response: pair.winner.0.max(pair.loser.0),
                },
            });
        }
    }

    let indexed: Vec<(usize, PreferencePair)> = dataset.pairs.iter().copied().enumerate().collect();
    let mut opt_state = match config.optimizer {
        OptimizerKind::Sgd => OptState::Sgd,
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => OptState::Adam(AdamState::new(policy.param_count(), beta1, beta2, epsilon)),
    };
    let mut batch_rng = match config.batch {
        BatchMode::Full => None,
        BatchMode::Minibatch { seed, .. } => Some(CounterRng::stream(seed, streams::MINIBATCH)),
    };

    let mut records = Vec::new();
    let mut current = policy.clone();

    let snapshot =
        |step: usize, policy: &P, records: &mut Vec<RunRecord>| -> Result<(), TrainError> {
            let table = policy.log_probs()?;
            let (mean_loss, mut grad) =
                batch_eval(policy, &table, reference, &config.loss, &indexed, step)?;
            let grad_norm = clip_gradient(&mut grad, config.grad_clip);
            for &(pair_id, pair) in &indexed {
                let diag = track_pair_diagnostics(&table, reference, &config.loss, &pair)?;
                records.push(RunRecord {
                    step,
                    mean_loss,
                    pair_id,
                    logits: diag.logits,
                    beta_logits: diag.beta_logits,
                    pi_w: diag.pi_w,
                    pi_l: diag.pi_l,
                    grad_pi_l: diag.grad_pi_l,
                    grad_pi_w: diag.grad_pi_w,
                    grad_norm_params: grad_norm,
                    saturated: diag.saturated,
                });
            }
            Ok(())
        };

    snapshot(0, &current, &mut records)?;

    for step in 1..=config.steps {
        let table = current.log_probs()?;
        let batch: Vec<(usize, PreferencePair)> = match (&config.batch, &mut batch_rng) {
            (BatchMode::Full, _) => indexed.clone(),
            (BatchMode::Minibatch { size, .. }, Some(rng)) => (0..*size)
                .map(|_| indexed[rng.next_index(indexed.len())])
                .collect(),
            (BatchMode::Minibatch { .. }, None) => unreachable!(),
        };
        let (_, mut grad) = batch_eval(&current, &table, reference, &config.loss, &batch, step)?;
        clip_gradient(&mut grad, config.grad_clip);

        current = match &mut opt_state {
            OptState::Sgd => current.apply_update(&grad, config.learning_rate)?,
            OptState::Adam(state) => {
                let (next, update) = adam_step(state, &grad, config.learning_rate)?;
                *state = next;
                current.apply_update(&update, 1.0)?
            }
        };

        if step % config.log_every == 0 || step == config.steps {
            snapshot(step, &current, &mut records)?;
        }
    }

    Ok(TrainOutcome {
        policy: current,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PreferenceDataset;
    use crate::policy::TabularPolicy;
    use crate::types::{PromptId, ResponseId};

    fn single_pair_dataset() -> PreferenceDataset {
        PreferenceDataset::manual(
            vec![PreferencePair {
                prompt: PromptId(0),
                winner: ResponseId(0),
                loser: ResponseId(1),
            }],
            1,
            2,
        )
        .unwrap()
    }

    fn setup() -> (TabularPolicy, ReferencePolicy, PreferenceDataset) {
        let policy = TabularPolicy::uniform(1, 2);
        let reference = ReferencePolicy::from_policy(&policy).unwrap();
        (policy, reference, single_pair_dataset())
    }

    #[test]
    fn zero_steps_are_rejected() {
        let (policy, reference, dataset) = setup();
        let config = TrainConfig::full_batch_sgd(LossSpec::spo(1.0).unwrap(), 0.1, 1, 1);
        let bad = TrainConfig { steps: 0, ..config };
        assert!(matches!(
            train(&policy, &reference, &dataset, &bad),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn spo_single_pair_training_converges_to_the_target() {
        let (policy, reference, dataset) = setup();
        let config = TrainConfig::full_batch_sgd(LossSpec::spo(1.0).unwrap(), 0.1, 5000, 5000);
        let outcome = train(&policy, &reference, &dataset, &config).unwrap();
        let table = outcome.policy.log_probs().unwrap();
        let logits = logits_diff(&table, reference.table(), &dataset.pairs[0])
            .unwrap()
            .value();
        assert!(
            (logits - 1.0).abs() <= 1e-3,
            "beta*logits = {logits} missed the fixed point"
        );
    }

    #[test]
    fn dpo_single_pair_logits_grow_without_a_fixed_point() {
        let (policy, reference, dataset) = setup();
        let config = TrainConfig::full_batch_sgd(LossSpec::dpo(0.1).unwrap(), 1.0, 5000, 500);
        let outcome = train(&policy, &reference, &dataset, &config).unwrap();
        let at = |step: usize| {
            outcome
                .records
                .iter()
                .find(|r| r.step == step)
                .map(|r| r.logits)
                .unwrap()
        };
        assert!(at(5000) > at(500));
        assert!(at(5000) > 10.0);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let state = AdamState::new(2, 0.9, 0.999, 1e-8);
        let (next, update) = adam_step(&state, &[0.3, -4.0], 0.05).unwrap();
        assert_eq!(next.t, 1);
        // Bias correction makes the first update lr * g/(|g| + eps').
        for (u, g) in update.iter().zip([0.3f64, -4.0]) {
            assert!((u.abs() - 0.05).abs() < 1e-6);
            assert_eq!(u.signum(), g.signum());
        }
    }

    #[test]
    fn adam_with_zero_gradients_never_moves_and_decays_moments() {
        let mut state = AdamState::new(1, 0.9, 0.999, 1e-8);
        state.m[0] = 1.0;
        state.v[0] = 1.0;
        for _ in 0..10 {
            let (next, update) = adam_step(&state, &[0.0], 0.1).unwrap();
            assert!(next.m[0] < state.m[0]);
            assert!(next.v[0] < state.v[0]);
            // Moments carried over from earlier steps still push the
            // parameters, but fresh zero gradients add nothing new.
            assert!(update[0].is_finite());
            state = next;
        }
        let fresh = AdamState::new(1, 0.9, 0.999, 1e-8);
        let (_, update) = adam_step(&fresh, &[0.0], 0.1).unwrap();
        assert_eq!(update[0], 0.0);
    }

    #[test]
    fn adam_matches_a_hand_computed_two_step_trace() {
        // Standard recurrence with beta1=0.9, beta2=0.999, eps=1e-8, lr=0.1
        // and gradients g1=1.0, g2=-0.5, written out by hand.
        let lr = 0.1;
        let g1 = 1.0;
        let g2 = -0.5;
        let state = AdamState::new(1, 0.9, 0.999, 1e-8);
        let (s1, u1) = adam_step(&state, &[g1], lr).unwrap();
        let (s2, u2) = adam_step(&s1, &[g2], lr).unwrap();

        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let m1_hat = m1 / (1.0 - 0.9f64);
        let v1_hat = v1 / (1.0 - 0.999f64);
        let expect_u1 = lr * m1_hat / (v1_hat.sqrt() + 1e-8);
        assert!((u1[0] - expect_u1).abs() < 1e-12);

        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let m2_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v2_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expect_u2 = lr * m2_hat / (v2_hat.sqrt() + 1e-8);
        assert!((u2[0] - expect_u2).abs() < 1e-12);
        assert!((s2.m[0] - m2).abs() < 1e-15);
        assert!((s2.v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_at_initialization_match_the_closed_forms() {
        let (policy, reference, dataset) = setup();
        let loss = LossSpec::dpo(0.1).unwrap();
        let table = policy.log_probs().unwrap();
        let diag = track_pair_diagnostics(&table, &reference, &loss, &dataset.pairs[0]).unwrap();
        assert_eq!(diag.logits, 0.0);
        assert_eq!(diag.beta_logits, 0.0);
        // grad_pi_l = beta * sigma(0) / pi_l = 0.1 * 0.5 / 0.5.
        assert!((diag.grad_pi_l - 0.1).abs() < 1e-15);
        assert!((diag.grad_pi_w + 0.1).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_vanish_at_the_spo_target() {
        let loss = LossSpec::spo(1.0).unwrap();
        // theta spread of 1 gives logits exactly 1 against a uniform
        // reference, i.e. beta*logits = 1.
        let policy = TabularPolicy::from_theta(vec![vec![1.0, 0.0]]).unwrap();
        let reference = ReferencePolicy::uniform(1, 2);
        let table = policy.log_probs().unwrap();
        let pair = single_pair_dataset().pairs[0];
        let diag = track_pair_diagnostics(&table, &reference, &loss, &pair).unwrap();
        assert!((diag.beta_logits - 1.0).abs() < 1e-12);
        assert_eq!(diag.grad_pi_l, 0.0);
        assert_eq!(diag.grad_pi_w, 0.0);
    }

    #[test]
    fn diagnostics_agree_with_the_chain_rule_route() {
        let (policy, reference, _) = setup();
        let policy = policy.apply_update(&[0.8, -0.4], 1.0).unwrap();
        let table = policy.log_probs().unwrap();
        let pair = single_pair_dataset().pairs[0];
        for loss in [
            LossSpec::dpo(0.3).unwrap(),
            LossSpec::spo(0.3).unwrap(),
            LossSpec::squared_target(0.3, 0.5).unwrap(),
        ] {
            let diag = track_pair_diagnostics(&table, &reference, &loss, &pair).unwrap();
            let logits = logits_diff(&table, reference.table(), &pair).unwrap();
            let d = loss.eval(logits).unwrap().d_dlogits;
            let (pi_w, pi_l) = pair_probs(&table, &pair).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel(diag.grad_pi_l, d * (-1.0 / pi_l)) < 1e-12);
            assert!(rel(diag.grad_pi_w, d * (1.0 / pi_w)) < 1e-12);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (policy, reference, _) = setup();
        let instance = crate::datagen::gen_instance(&crate::datagen::InstanceSpec {
            n_prompts: 1,
            n_responses: 2,
            reward_scale: 1.0,
            seed: 4,
            feature_dim: None,
            feature_collision: 0.0,
        })
        .unwrap();
        let dataset = crate::datagen::sample_preferences_from(&instance, 8, 4).unwrap();
        let config = TrainConfig {
            loss: LossSpec::dpo(0.1).unwrap(),
            optimizer: OptimizerKind::adam(),
            learning_rate: 0.01,
            steps: 200,
            batch: BatchMode::Minibatch { size: 4, seed: 9 },
            log_every: 50,
            grad_clip: Some(1.0),
        };
        let a = train(&policy, &reference, &dataset, &config).unwrap();
        let b = train(&policy, &reference, &dataset, &config).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.policy.params(), b.policy.params());
        let rows_a: Vec<String> = a.records.iter().map(|r| r.csv_row()).collect();
        let rows_b: Vec<String> = b.records.iter().map(|r| r.csv_row()).collect();
        assert_eq!(rows_a, rows_b);
    }

    #[test]
    fn batch_gradient_matches_finite_differences_at_checkpoints() {
        use crate::gradcheck::{central_diff, relative_step};
        let instance = crate::datagen::gen_instance(&crate::datagen::InstanceSpec {
            n_prompts: 2,
            n_responses: 3,
            reward_scale: 1.0,
            seed: 8,
            feature_dim: None,
            feature_collision: 0.0,
        })
        .unwrap();
        let dataset = crate::datagen::sample_preferences_from(&instance, 12, 8).unwrap();
        let reference = ReferencePolicy::uniform(2, 3);
        let loss = LossSpec::spo(0.5).unwrap();

        for checkpoint in 0..10u64 {
            let policy = TabularPolicy::seeded(2, 3, 1.5, checkpoint);
            let table = policy.log_probs().unwrap();
            let indexed: Vec<(usize, PreferencePair)> =
                dataset.pairs.iter().copied().enumerate().collect();
            let (_, grad) = batch_eval(&policy, &table, &reference, &loss, &indexed, 0).unwrap();
            let params = policy.params();
            for i in 0..params.len() {
                let mut dir = vec![0.0; params.len()];
                dir[i] = 1.0;
                let f = |t: f64| {
                    let p = policy.apply_update(&dir, -t).unwrap();
                    let tb = p.log_probs().unwrap();
                    let (loss_value, _) =
                        batch_eval(&p, &tb, &reference, &loss, &indexed, 0).unwrap();
                    loss_value
                };
                let numeric = central_diff(f, 0.0, relative_step(params[i])).unwrap();
                let denom = grad[i].abs().max(numeric.abs());
                if denom > 1e-12 {
                    assert!(
                        (grad[i] - numeric).abs() / denom < 1e-4,
                        "checkpoint {checkpoint}, param {i}: {} vs {numeric}",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_clipping_bounds_the_reported_norm() {
        let (policy, reference, dataset) = setup();
        let clip = 0.01;
        let config = TrainConfig {
            grad_clip: Some(clip),
            ..TrainConfig::full_batch_sgd(LossSpec::dpo(1.0).unwrap(), 0.5, 50, 5)
        };
        let outcome = train(&policy, &reference, &dataset, &config).unwrap();
        for record in &outcome.records {
            assert!(record.grad_norm_params <= clip);
        }
        // Without clipping the same run exceeds the threshold somewhere.
        let unclipped = TrainConfig {
            grad_clip: None,
            ..config
        };
        let outcome = train(&policy, &reference, &dataset, &unclipped).unwrap();
        assert!(outcome.records.iter().any(|r| r.grad_norm_params > clip));
    }

    #[test]
    fn out_of_range_pairs_are_rejected_upfront() {
        let (policy, reference, _) = setup();
        let dataset = PreferenceDataset::manual(
            vec![PreferencePair {
                prompt: PromptId(0),
                winner: ResponseId(0),
                loser: ResponseId(5),
            }],
            1,
            6,
        )
        .unwrap();
        let config = TrainConfig::full_batch_sgd(LossSpec::dpo(0.1).unwrap(), 0.1, 1, 1);
        assert!(matches!(
            train(&policy, &reference, &dataset, &config),
            Err(TrainError::PairOutOfRange { .. })
        ));
    }

    #[test]
    fn step_zero_snapshot_is_logged_before_any_update() {
        let (policy, reference, dataset) = setup();
        let config = TrainConfig::full_batch_sgd(LossSpec::spo(1.0).unwrap(), 0.1, 3, 10);
        let outcome = train(&policy, &reference, &dataset, &config).unwrap();
        let steps: Vec<usize> = outcome.records.iter().map(|r| r.step).collect();
        // Step 0 plus the forced final step.
        assert_eq!(steps, vec![0, 3]);
        assert_eq!(outcome.records[0].logits, 0.0);
    }
}
