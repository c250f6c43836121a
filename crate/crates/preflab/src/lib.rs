//! A desk-scale laboratory for preference-optimization losses.
//!
//! The crate provides everything needed to measure how pairwise preference
//! losses behave as functions of the policy/reference log-probability ratio:
//!
//! - [`types`]: prompt/response ids, preference pairs, normalized
//!   log-probability tables, and the logits difference
//!   `log π(y_w|x)/π_ref(y_w|x) − log π(y_l|x)/π_ref(y_l|x)`.
//! - [`losses`]: the log-sigmoid loss (DPO), the exponentially damped
//!   target loss `−X·e^{−X}` with `X = β·logits` (SPO), and a squared-target
//!   baseline, each with exact derivatives with respect to the logits and
//!   with respect to the pair probabilities.
//! - [`gradcheck`]: a central finite-difference oracle used to validate all
//!   closed-form derivatives before they are trusted.
//! - [`policy`]: tabular and linear-feature softmax policies with exact
//!   log-probability Jacobians, plus frozen reference policies.
//! - [`oracle`]: the closed-form optimal policy
//!   `π*(y|x) ∝ π_ref(y|x)·exp(r(x,y)/β)`, the KL-regularized objective,
//!   KL divergence, and optimality-condition residuals.
//! - [`datagen`]: deterministic synthetic instances and Bradley–Terry
//!   preference sampling driven by a counter-based generator.
//! - [`trainer`]: a deterministic SGD/Adam loop that logs the per-step
//!   quantities the loss analysis is about (logits, Π_w, Π_l, gradients).
//! - [`experiments`]: loss curves, gradient-magnitude sweeps with power-law
//!   fits, oracle verification, and the reward-hacking probe.
//!
//! All probability arithmetic is done in the natural-log domain;
//! probabilities are materialized only at reporting boundaries.

pub mod datagen;
pub mod experiments;
pub(crate) mod fmt;
pub mod gradcheck;
pub mod losses;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod types;

pub use losses::{LossEval, LossKind, LossSpec};
pub use types::{LogProbTable, LogitsDiff, PreferencePair, PromptId, ResponseId};
