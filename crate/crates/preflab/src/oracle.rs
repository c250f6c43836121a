//! Closed-form ground truth for the KL-regularized alignment objective.
//!
//! For a reward table `r(x,y)`, reference policy `π_ref`, and `β > 0`, the
//! objective `E_{y~π}[r] − β·KL[π ∥ π_ref]` (averaged uniformly over
//! prompts) is maximized in closed form by
//!
//! ```text
//! π*(y|x) = π_ref(y|x) · exp(r(x,y)/β) / Z(x),
//! Z(x)    = Σ_y π_ref(y|x) · exp(r(x,y)/β),
//! ```
//!
//! and at the optimum the logits difference of every pair equals
//! `(r(x,y_w) − r(x,y_l))/β`. This module evaluates all of these exactly by
//! summation over the finite response sets, giving the trainer and the loss
//! experiments an independent target to be checked against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::ReferencePolicy;
use crate::types::{
    logits_diff, CoreError, LogProbTable, PreferencePair, PromptId, ResponseId, LOG_PROB_FLOOR,
};

/// `|r/β|` beyond this makes `exp` meaningless in double precision.
pub const EXP_GUARD: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error(
        "exp overflow: r/beta = {ratio} for prompt {prompt}, response {response} \
         exceeds ±{guard}; use a larger beta or a smaller reward scale"
    )]
    ExpOverflow {
        prompt: usize,
        response: usize,
        ratio: f64,
        guard: f64,
    },
    #[error("reward table at prompt {prompt}, response {response} is not finite")]
    NonFiniteReward { prompt: usize, response: usize },
    #[error("shape mismatch: rewards cover {rewards:?} responses, table {table:?}")]
    ShapeMismatch {
        rewards: Vec<usize>,
        table: Vec<usize>,
    },
    #[error("reward CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Ground-truth reward table `(prompt, response) → r(x,y)`, in reward units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    rewards: Vec<Vec<f64>>,
}

impl RewardModel {
    pub fn new(rewards: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        if rewards.is_empty() || rewards.iter().any(|r| r.is_empty()) {
            return Err(OracleError::Core(CoreError::EmptyTable));
        }
        for (p, row) in rewards.iter().enumerate() {
            for (r, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(OracleError::NonFiniteReward {
                        prompt: p,
                        response: r,
                    });
                }
            }
        }
        Ok(Self { rewards })
    }

    pub fn reward(&self, prompt: PromptId, response: ResponseId) -> Result<f64, OracleError> {
        self.rewards
            .get(prompt.0)
            .and_then(|row| row.get(response.0))
            .copied()
            .ok_or(OracleError::Core(CoreError::MissingId {
                prompt: prompt.0,
                response: response.0,
            }))
    }

    pub fn n_prompts(&self) -> usize {
        self.rewards.len()
    }

    pub fn n_responses(&self, prompt: PromptId) -> usize {
        self.rewards.get(prompt.0).map(|r| r.len()).unwrap_or(0)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    fn shape(&self) -> Vec<usize> {
        self.rewards.iter().map(|r| r.len()).collect()
    }

    fn check_aligned(&self, table: &LogProbTable) -> Result<(), OracleError> {
        let table_shape: Vec<usize> = table.rows().iter().map(|r| r.len()).collect();
        if self.shape() != table_shape {
            return Err(OracleError::ShapeMismatch {
                rewards: self.shape(),
                table: table_shape,
            });
        }
        Ok(())
    }

    /// CSV serialization: `prompt_id,response_id,reward`, one row per entry
    /// in row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt_id,response_id,reward\n");
        for (p, row) in self.rewards.iter().enumerate() {
            for (r, v) in row.iter().enumerate() {
                out.push_str(&format!("{p},{r},{}\n", crate::fmt::f64_csv(*v)));
            }
        }
        out
    }

    /// Parses the CSV form; rows may appear in any order but must cover a
    /// dense prompt/response grid.
    pub fn from_csv(text: &str) -> Result<Self, OracleError> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let err = |message: String| OracleError::Csv {
                line: i + 1,
                message,
            };
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            }
            let p: usize = fields[0]
                .trim()
                .parse()
                .map_err(|e| err(format!("bad prompt id: {e}")))?;
            let r: usize = fields[1]
                .trim()
                .parse()
                .map_err(|e| err(format!("bad response id: {e}")))?;
            let v: f64 = fields[2]
                .trim()
                .parse()
                .map_err(|e| err(format!("bad reward: {e}")))?;
            entries.push((p, r, v));
        }
        if entries.is_empty() {
            return Err(OracleError::Core(CoreError::EmptyTable));
        }
        let n_prompts = entries.iter().map(|e| e.0).max().unwrap() + 1;
        let mut rows: Vec<Vec<Option<f64>>> = vec![Vec::new(); n_prompts];
        for (p, r, v) in entries {
            if rows[p].len() <= r {
                rows[p].resize(r + 1, None);
            }
            rows[p][r] = Some(v);
        }
        let rewards = rows
            .into_iter()
            .enumerate()
            .map(|(p, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(r, v)| {
                        v.ok_or(OracleError::Core(CoreError::MissingId {
                            prompt: p,
                            response: r,
                        }))
                    })
                    .collect::<Result<Vec<f64>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rewards)
    }
}

/// Residual of the optimality condition for one pair:
/// `logits(π) − (r(x,y_w) − r(x,y_l))/β`. Zero at the optimal policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalityResidual {
    pub pair: PreferencePair,
    pub value: f64,
}

fn check_beta(beta: f64) -> Result<(), OracleError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(OracleError::InvalidBeta(beta));
    }
    Ok(())
}

/// Exact optimal policy `π*(y|x) ∝ π_ref(y|x)·exp(r(x,y)/β)`, normalized in
/// the log domain per prompt.
pub fn optimal_policy(
    reward: &RewardModel,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<LogProbTable, OracleError> {
    check_beta(beta)?;
    reward.check_aligned(reference.table())?;
    let mut rows = Vec::with_capacity(reward.n_prompts());
    for (p, reward_row) in reward.rows().iter().enumerate() {
        let ref_row = &reference.table().rows()[p];
        let mut scores = Vec::with_capacity(reward_row.len());
        for (r, (&rv, &lref)) in reward_row.iter().zip(ref_row).enumerate() {
            let ratio = rv / beta;
            if ratio.abs() > EXP_GUARD {
                return Err(OracleError::ExpOverflow {
                    prompt: p,
                    response: r,
                    ratio,
                    guard: EXP_GUARD,
                });
            }
            scores.push(lref + ratio);
        }
        rows.push(crate::policy::log_softmax_row(&scores));
    }
    Ok(LogProbTable::new(rows)?)
}

/// Per-prompt log-partition values `ln Z(x) = ln Σ_y π_ref(y|x)·e^{r(x,y)/β}`.
pub fn log_partition(
    reward: &RewardModel,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<Vec<f64>, OracleError> {
    check_beta(beta)?;
    reward.check_aligned(reference.table())?;
    let mut out = Vec::with_capacity(reward.n_prompts());
    for (p, reward_row) in reward.rows().iter().enumerate() {
        let ref_row = &reference.table().rows()[p];
        let scores: Vec<f64> = reward_row
            .iter()
            .zip(ref_row)
            .map(|(&rv, &lref)| lref + rv / beta)
            .collect();
        for (r, s) in scores.iter().enumerate() {
            if !s.is_finite() || (reward_row[r] / beta).abs() > EXP_GUARD {
                return Err(OracleError::ExpOverflow {
                    prompt: p,
                    response: r,
                    ratio: reward_row[r] / beta,
                    guard: EXP_GUARD,
                });
            }
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln());
    }
    Ok(out)
}

/// Exact objective `mean_x Σ_y π(y|x)·[r(x,y) − β·(log π(y|x) − log π_ref(y|x))]`,
/// with `0·log 0` treated as 0.
pub fn rlhf_objective(
    policy: &LogProbTable,
    reward: &RewardModel,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<f64, OracleError> {
    check_beta(beta)?;
    reward.check_aligned(policy)?;
    reward.check_aligned(reference.table())?;
    let mut total = 0.0;
    for (p, reward_row) in reward.rows().iter().enumerate() {
        let pol_row = &policy.rows()[p];
        let ref_row = &reference.table().rows()[p];
        let mut prompt_value = 0.0;
        for ((lp, lref), &rv) in pol_row.iter().zip(ref_row).zip(reward_row) {
            let prob = lp.exp();
            if prob > 0.0 {
                prompt_value += prob * (rv - beta * (lp - lref));
            }
        }
        total += prompt_value;
    }
    Ok(total / reward.n_prompts() as f64)
}

/// KL divergence per prompt and its mean over prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlDivergence {
    pub per_prompt: Vec<f64>,
    pub mean: f64,
}

/// `KL[p ∥ q] = Σ_y p·(log p − log q)` per prompt. A `q` entry at the
/// saturation floor paired with `p > 0` reports infinity explicitly rather
/// than a clamped finite number.
pub fn kl_divergence(p: &LogProbTable, q: &LogProbTable) -> Result<KlDivergence, OracleError> {
    if !p.same_shape(q) {
        return Err(OracleError::ShapeMismatch {
            rewards: p.rows().iter().map(|r| r.len()).collect(),
            table: q.rows().iter().map(|r| r.len()).collect(),
        });
    }
    let mut per_prompt = Vec::with_capacity(p.n_prompts());
    for (prow, qrow) in p.rows().iter().zip(q.rows()) {
        let mut kl = 0.0;
        for (lp, lq) in prow.iter().zip(qrow) {
            let prob = lp.exp();
            if prob == 0.0 {
                continue;
            }
            if *lq <= LOG_PROB_FLOOR && *lp > LOG_PROB_FLOOR {
                kl = f64::INFINITY;
                break;
            }
            kl += prob * (lp - lq);
        }
        per_prompt.push(kl);
    }
    let mean = per_prompt.iter().sum::<f64>() / per_prompt.len() as f64;
    Ok(KlDivergence { per_prompt, mean })
}

/// Optimality-condition residuals for a set of pairs.
pub fn optimality_residuals(
    policy: &LogProbTable,
    reference: &ReferencePolicy,
    reward: &RewardModel,
    beta: f64,
    pairs: &[PreferencePair],
) -> Result<Vec<OptimalityResidual>, OracleError> {
    check_beta(beta)?;
    reward.check_aligned(policy)?;
    pairs
        .iter()
        .map(|pair| {
            let logits = logits_diff(policy, reference.table(), pair)?;
            let target = (reward.reward(pair.prompt, pair.winner)?
                - reward.reward(pair.prompt, pair.loser)?)
                / beta;
            Ok(OptimalityResidual {
                pair: *pair,
                value: logits.value() - target,
            })
        })
        .collect()
}

/// All ordered pairs `(winner, loser)` with `winner ≠ loser` over a reward
/// table's prompt/response grid.
pub fn all_ordered_pairs(reward: &RewardModel) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for (p, row) in reward.rows().iter().enumerate() {
        for w in 0..row.len() {
            for l in 0..row.len() {
                if w != l {
                    pairs.push(PreferencePair {
                        prompt: PromptId(p),
                        winner: ResponseId(w),
                        loser: ResponseId(l),
                    });
                }
            }
        }
    }
    pairs
}
