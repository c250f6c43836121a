//! Shared domain types: prompt/response ids, preference pairs, normalized
//! log-probability tables, and the policy-vs-reference logits difference.
//!
//! Log-probabilities are natural logs throughout. Tables keep values in the
//! log domain; probabilities are materialized only at reporting boundaries
//! (e.g. [`pair_probs`]), because the behavior of interest is exactly what
//! happens as the losing probability approaches zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to stored log-probabilities, just above the point where
/// `exp` underflows to a hard zero in double precision. Floored entries are
/// flagged so reports can mark them as saturated instead of trusting them.
pub const LOG_PROB_FLOOR: f64 = -745.0;

/// Tolerance on the per-prompt normalization invariant
/// `|Σ_y exp(log π(y|x)) − 1| ≤ NORMALIZATION_TOL`.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Smallest probability a table can report; `exp(LOG_PROB_FLOOR)`.
pub fn prob_floor() -> f64 {
    LOG_PROB_FLOOR.exp()
}

/// Index into the finite prompt set. Valid ids are exactly `0..count`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct PromptId(pub usize);

/// Index into a prompt's finite response set. Valid ids are exactly
/// `0..count` for that prompt.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ResponseId(pub usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("no entry for prompt {prompt}, response {response}")]
    MissingId { prompt: usize, response: usize },
    #[error("prompt {prompt}: winner and loser are the same response {response}")]
    WinnerEqualsLoser { prompt: usize, response: usize },
    #[error("{what} is not finite")]
    NonFinite { what: String },
    #[error("prompt {prompt}: probabilities sum to {sum}, expected 1 within {tol:e}")]
    NotNormalized { prompt: usize, sum: f64, tol: f64 },
    #[error("prompt {prompt}, response {response}: log-probability {value} is positive")]
    PositiveLogProb {
        prompt: usize,
        response: usize,
        value: f64,
    },
    #[error("prompt {prompt} has no responses")]
    EmptyPrompt { prompt: usize },
    #[error("table has no prompts")]
    EmptyTable,
}

/// One preference comparison: for `prompt`, response `winner` was preferred
/// over response `loser`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: PromptId,
    pub winner: ResponseId,
    pub loser: ResponseId,
}

impl PreferencePair {
    pub fn new(prompt: PromptId, winner: ResponseId, loser: ResponseId) -> Result<Self, CoreError> {
        if winner == loser {
            return Err(CoreError::WinnerEqualsLoser {
                prompt: prompt.0,
                response: winner.0,
            });
        }
        Ok(Self {
            prompt,
            winner,
            loser,
        })
    }

    /// Same comparison with the label flipped.
    pub fn swapped(self) -> Self {
        Self {
            prompt: self.prompt,
            winner: self.loser,
            loser: self.winner,
        }
    }
}

/// Normalized log-probability table: `(prompt, response) → log π(y|x)`.
///
/// Invariants enforced at construction:
/// - every entry is finite and at most 0 (probabilities in `(0, 1]`),
/// - entries below [`LOG_PROB_FLOOR`] are clamped to the floor and counted,
/// - for every prompt, `Σ_y exp(log π(y|x)) = 1` within
///   [`NORMALIZATION_TOL`].
///
/// The table is immutable after construction and safe to share across
/// concurrent readers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbTable {
    rows: Vec<Vec<f64>>,
    floored: usize,
}

impl LogProbTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, CoreError> {
        Self::with_floor(rows, LOG_PROB_FLOOR)
    }

    /// Builds a table with an explicit saturation floor.
    pub fn with_floor(mut rows: Vec<Vec<f64>>, floor: f64) -> Result<Self, CoreError> {
        if rows.is_empty() {
            return Err(CoreError::EmptyTable);
        }
        let mut floored = 0usize;
        for (p, row) in rows.iter_mut().enumerate() {
            if row.is_empty() {
                return Err(CoreError::EmptyPrompt { prompt: p });
            }
            for (r, v) in row.iter_mut().enumerate() {
                if !v.is_finite() {
                    return Err(CoreError::NonFinite {
                        what: format!("log-probability for prompt {p}, response {r}"),
                    });
                }
                if *v > 0.0 {
                    // Tolerate rounding on exact-1 probabilities, reject
                    // anything genuinely above 1.
                    if *v <= NORMALIZATION_TOL {
                        *v = 0.0;
                    } else {
                        return Err(CoreError::PositiveLogProb {
                            prompt: p,
                            response: r,
                            value: *v,
                        });
                    }
                }
                if *v < floor {
                    *v = floor;
                    floored += 1;
                }
            }
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(CoreError::NotNormalized {
                    prompt: p,
                    sum,
                    tol: NORMALIZATION_TOL,
                });
            }
        }
        Ok(Self { rows, floored })
    }

    /// Uniform table over `n_responses` per prompt.
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        assert!(n_prompts > 0 && n_responses > 0);
        let lp = -(n_responses as f64).ln();
        Self {
            rows: vec![vec![lp; n_responses]; n_prompts],
            floored: 0,
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.rows.len()
    }

    pub fn n_responses(&self, prompt: PromptId) -> Result<usize, CoreError> {
        self.rows
            .get(prompt.0)
            .map(|r| r.len())
            .ok_or(CoreError::MissingId {
                prompt: prompt.0,
                response: 0,
            })
    }

    pub fn log_prob(&self, prompt: PromptId, response: ResponseId) -> Result<f64, CoreError> {
        self.rows
            .get(prompt.0)
            .and_then(|row| row.get(response.0))
            .copied()
            .ok_or(CoreError::MissingId {
                prompt: prompt.0,
                response: response.0,
            })
    }

    /// Probability materialized from the stored log value; in `(0, 1]`.
    pub fn prob(&self, prompt: PromptId, response: ResponseId) -> Result<f64, CoreError> {
        Ok(self.log_prob(prompt, response)?.exp())
    }

    /// Whether the stored value sits at the saturation floor.
    pub fn is_at_floor(&self, prompt: PromptId, response: ResponseId) -> Result<bool, CoreError> {
        Ok(self.log_prob(prompt, response)? <= LOG_PROB_FLOOR)
    }

    /// Number of entries clamped to the floor at construction.
    pub fn floored_entries(&self) -> usize {
        self.floored
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn same_shape(&self, other: &LogProbTable) -> bool {
        self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.len() == b.len())
    }

    pub(crate) fn contains(&self, pair: &PreferencePair) -> bool {
        self.rows
            .get(pair.prompt.0)
            .map(|row| pair.winner.0 < row.len() && pair.loser.0 < row.len())
            .unwrap_or(false)
    }
}

/// The policy-dependent logits difference
/// `[log π(y_w|x) − log π_ref(y_w|x)] − [log π(y_l|x) − log π_ref(y_l|x)]`.
/// Construction rejects NaN and ±∞.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitsDiff(f64);

impl LogitsDiff {
    pub fn new(value: f64) -> Result<Self, CoreError> {
        if !value.is_finite() {
            return Err(CoreError::NonFinite {
                what: format!("logits difference {value}"),
            });
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Evaluates the logits difference of `pair` between `policy` and
/// `reference`.
pub fn logits_diff(
    policy: &LogProbTable,
    reference: &LogProbTable,
    pair: &PreferencePair,
) -> Result<LogitsDiff, CoreError> {
    let pw = policy.log_prob(pair.prompt, pair.winner)?;
    let pl = policy.log_prob(pair.prompt, pair.loser)?;
    let rw = reference.log_prob(pair.prompt, pair.winner)?;
    let rl = reference.log_prob(pair.prompt, pair.loser)?;
    LogitsDiff::new((pw - rw) - (pl - rl))
}

/// Materializes `(Π_w, Π_l) = (π(y_w|x), π(y_l|x))` for a pair.
pub fn pair_probs(policy: &LogProbTable, pair: &PreferencePair) -> Result<(f64, f64), CoreError> {
    Ok((
        policy.prob(pair.prompt, pair.winner)?,
        policy.prob(pair.prompt, pair.loser)?,
    ))
}
