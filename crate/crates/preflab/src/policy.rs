//! Parameterized toy policies with exact log-probability Jacobians.
//!
//! Two parameterizations feed the trainer: a tabular softmax with one free
//! score per `(prompt, response)`, and a linear-feature softmax whose
//! responses share a single weight vector through feature vectors. The
//! second is the stand-in for parameter sharing in large models: pushing
//! one response's probability can move others through the shared weights.
//!
//! Policies are value-like. Updates return new instances; nothing mutates
//! in place, so concurrent reads are safe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::CounterRng;
use crate::types::{CoreError, LogProbTable, PromptId, ResponseId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("update direction has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt {prompt}, response {response}: feature dimension {got}, expected {expected}")]
    FeatureDim {
        prompt: usize,
        response: usize,
        expected: usize,
        got: usize,
    },
    #[error("{what} is not finite")]
    NonFinite { what: String },
    #[error("document does not describe a {expected} policy")]
    WrongDocument { expected: &'static str },
    #[error("invalid policy JSON: {0}")]
    Json(String),
    #[error("policy must have at least one prompt with at least one response")]
    EmptyShape,
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Anything that yields normalized log-probabilities and their parameter
/// gradient, and can take a gradient step.
pub trait PolicyView {
    /// Normalized log-probability table for the current parameters.
    fn log_probs(&self) -> Result<LogProbTable, PolicyError>;

    /// Length of the flattened parameter vector.
    fn param_count(&self) -> usize;

    /// Flattened parameter vector.
    fn params(&self) -> Vec<f64>;

    /// `∂ log π(response|prompt) / ∂ params` as a flattened vector.
    fn dlogprob_dparams(
        &self,
        prompt: PromptId,
        response: ResponseId,
    ) -> Result<Vec<f64>, PolicyError>;

    /// Returns a policy with `params − step · direction`; the original is
    /// unchanged.
    fn apply_update(&self, direction: &[f64], step: f64) -> Result<Self, PolicyError>
    where
        Self: Sized;
}

/// Max-subtracted log-softmax of one score row. Parameters grow without
/// bound under DPO training, so the subtraction is load-bearing.
pub(crate) fn log_softmax_row(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

fn softmax_row(scores: &[f64]) -> Vec<f64> {
    log_softmax_row(scores).iter().map(|lp| lp.exp()).collect()
}

fn check_finite(values: &[f64], what: &str) -> Result<(), PolicyError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite { what: what.into() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tabular softmax policy
// ---------------------------------------------------------------------------

/// Softmax policy with an independent score per `(prompt, response)`:
/// `log π(y|x) = θ(x,y) − logsumexp_y' θ(x,y')`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    theta: Vec<Vec<f64>>,
}

impl TabularPolicy {
    /// All scores zero: the uniform policy. This is the default
    /// initialization, which keeps baselines deterministic.
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        assert!(n_prompts > 0 && n_responses > 0);
        Self {
            theta: vec![vec![0.0; n_responses]; n_prompts],
        }
    }

    pub fn from_theta(theta: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if theta.is_empty() || theta.iter().any(|row| row.is_empty()) {
            return Err(PolicyError::EmptyShape);
        }
        for (p, row) in theta.iter().enumerate() {
            check_finite(row, &format!("theta for prompt {p}"))?;
        }
        Ok(Self { theta })
    }

    /// Seeded random initialization with scores uniform on `[-scale, scale)`.
    pub fn seeded(n_prompts: usize, n_responses: usize, scale: f64, seed: u64) -> Self {
        let mut rng = CounterRng::stream(seed, crate::rng::streams::INIT);
        let theta = (0..n_prompts)
            .map(|_| {
                (0..n_responses)
                    .map(|_| scale * rng.next_symmetric())
                    .collect()
            })
            .collect();
        Self { theta }
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        &self.theta
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.theta.len());
        let mut acc = 0;
        for row in &self.theta {
            offsets.push(acc);
            acc += row.len();
        }
        offsets
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument::Tabular {
            prompts: self.theta.len(),
            responses_per_prompt: self.theta.iter().map(|r| r.len()).collect(),
            params: self.theta.clone(),
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self, PolicyError> {
        match doc {
            PolicyDocument::Tabular { params, .. } => Self::from_theta(params.clone()),
            _ => Err(PolicyError::WrongDocument {
                expected: "tabular",
            }),
        }
    }
}

impl PolicyView for TabularPolicy {
    fn log_probs(&self) -> Result<LogProbTable, PolicyError> {
        let rows = self.theta.iter().map(|row| log_softmax_row(row)).collect();
        Ok(LogProbTable::new(rows)?)
    }

    fn param_count(&self) -> usize {
        self.theta.iter().map(|r| r.len()).sum()
    }

    fn params(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    fn dlogprob_dparams(
        &self,
        prompt: PromptId,
        response: ResponseId,
    ) -> Result<Vec<f64>, PolicyError> {
        let row = self
            .theta
            .get(prompt.0)
            .ok_or(CoreError::MissingId {
                prompt: prompt.0,
                response: response.0,
            })?
            .as_slice();
        if response.0 >= row.len() {
            return Err(CoreError::MissingId {
                prompt: prompt.0,
                response: response.0,
            }
            .into());
        }
        let probs = softmax_row(row);
        let mut grad = vec![0.0; self.param_count()];
        let base = self.offsets()[prompt.0];
        for (y, &p) in probs.iter().enumerate() {
            grad[base + y] = if y == response.0 { 1.0 - p } else { -p };
        }
        Ok(grad)
    }

    fn apply_update(&self, direction: &[f64], step: f64) -> Result<Self, PolicyError> {
        let n = self.param_count();
        if direction.len() != n {
            return Err(PolicyError::DimensionMismatch {
                expected: n,
                got: direction.len(),
            });
        }
        let mut theta = self.theta.clone();
        let mut i = 0;
        for row in &mut theta {
            for v in row.iter_mut() {
                *v -= step * direction[i];
                i += 1;
            }
        }
        Ok(Self { theta })
    }
}

// ---------------------------------------------------------------------------
// Linear-feature softmax policy
// ---------------------------------------------------------------------------

/// Softmax policy over shared weights: `score(x,y) = w · φ(x,y)`, with a
/// per-prompt softmax over the scores. Responses whose feature vectors
/// overlap are coupled through `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeaturePolicy {
    features: Vec<Vec<Vec<f64>>>,
    weights: Vec<f64>,
}

impl LinearFeaturePolicy {
    pub fn new(features: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> Result<Self, PolicyError> {
        if features.is_empty() || features.iter().any(|p| p.is_empty()) || weights.is_empty() {
            return Err(PolicyError::EmptyShape);
        }
        let d = weights.len();
        check_finite(&weights, "weights")?;
        for (p, prompt_feats) in features.iter().enumerate() {
            for (r, phi) in prompt_feats.iter().enumerate() {
                if phi.len() != d {
                    return Err(PolicyError::FeatureDim {
                        prompt: p,
                        response: r,
                        expected: d,
                        got: phi.len(),
                    });
                }
                check_finite(phi, &format!("features for prompt {p}, response {r}"))?;
            }
        }
        Ok(Self { features, weights })
    }

    /// Zero weights: the uniform policy regardless of features.
    pub fn zeroed(features: Vec<Vec<Vec<f64>>>, dim: usize) -> Result<Self, PolicyError> {
        Self::new(features, vec![0.0; dim])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn features(&self) -> &[Vec<Vec<f64>>] {
        &self.features
    }

    fn score_row(&self, prompt: usize) -> Vec<f64> {
        self.features[prompt]
            .iter()
            .map(|phi| phi.iter().zip(&self.weights).map(|(f, w)| f * w).sum())
            .collect()
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument::Linear {
            prompts: self.features.len(),
            responses_per_prompt: self.features.iter().map(|p| p.len()).collect(),
            features: self.features.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self, PolicyError> {
        match doc {
            PolicyDocument::Linear {
                features, weights, ..
            } => Self::new(features.clone(), weights.clone()),
            _ => Err(PolicyError::WrongDocument { expected: "linear" }),
        }
    }
}

impl PolicyView for LinearFeaturePolicy {
    fn log_probs(&self) -> Result<LogProbTable, PolicyError> {
        let rows = (0..self.features.len())
            .map(|p| log_softmax_row(&self.score_row(p)))
            .collect();
        Ok(LogProbTable::new(rows)?)
    }

    fn param_count(&self) -> usize {
        self.weights.len()
    }

    fn params(&self) -> Vec<f64> {
        self.weights.clone()
    }

    fn dlogprob_dparams(
        &self,
        prompt: PromptId,
        response: ResponseId,
    ) -> Result<Vec<f64>, PolicyError> {
        let prompt_feats = self.features.get(prompt.0).ok_or(CoreError::MissingId {
            prompt: prompt.0,
            response: response.0,
        })?;
        let phi_y = prompt_feats.get(response.0).ok_or(CoreError::MissingId {
            prompt: prompt.0,
            response: response.0,
        })?;
        let probs = softmax_row(&self.score_row(prompt.0));
        // ∂ log π(y|x)/∂w = φ(x,y) − Σ_y' π(y'|x) φ(x,y')
        let mut grad = phi_y.clone();
        for (phi, &p) in prompt_feats.iter().zip(&probs) {
            for (g, f) in grad.iter_mut().zip(phi) {
                *g -= p * f;
            }
        }
        Ok(grad)
    }

    fn apply_update(&self, direction: &[f64], step: f64) -> Result<Self, PolicyError> {
        if direction.len() != self.weights.len() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.weights.len(),
                got: direction.len(),
            });
        }
        let weights = self
            .weights
            .iter()
            .zip(direction)
            .map(|(w, d)| w - step * d)
            .collect();
        Ok(Self {
            features: self.features.clone(),
            weights,
        })
    }
}

// ---------------------------------------------------------------------------
// Frozen reference policy
// ---------------------------------------------------------------------------

/// Frozen log-probability snapshot the trained policy is regularized
/// toward. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy {
    table: LogProbTable,
}

impl ReferencePolicy {
    pub fn new(table: LogProbTable) -> Self {
        Self { table }
    }

    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self::new(LogProbTable::uniform(n_prompts, n_responses))
    }

    /// Snapshot of a policy's current log-probabilities. The conventional
    /// choice is to snapshot the initial policy before training starts.
    pub fn from_policy<P: PolicyView>(policy: &P) -> Result<Self, PolicyError> {
        Ok(Self::new(policy.log_probs()?))
    }

    pub fn table(&self) -> &LogProbTable {
        &self.table
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument::Reference {
            prompts: self.table.n_prompts(),
            responses_per_prompt: self.table.rows().iter().map(|r| r.len()).collect(),
            log_probs: self.table.rows().to_vec(),
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self, PolicyError> {
        match doc {
            PolicyDocument::Reference { log_probs, .. } => {
                Ok(Self::new(LogProbTable::new(log_probs.clone())?))
            }
            _ => Err(PolicyError::WrongDocument {
                expected: "reference",
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// JSON document
// ---------------------------------------------------------------------------

/// On-disk form of a policy:
/// `{"kind", "prompts", "responses_per_prompt", "params" | "features" + "weights" | "log_probs"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyDocument {
    Tabular {
        prompts: usize,
        responses_per_prompt: Vec<usize>,
        params: Vec<Vec<f64>>,
    },
    Linear {
        prompts: usize,
        responses_per_prompt: Vec<usize>,
        features: Vec<Vec<Vec<f64>>>,
        weights: Vec<f64>,
    },
    Reference {
        prompts: usize,
        responses_per_prompt: Vec<usize>,
        log_probs: Vec<Vec<f64>>,
    },
}

impl PolicyDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(text).map_err(|e| PolicyError::Json(e.to_string()))
    }
}
