//! Deterministic synthetic instances and Bradley–Terry preference sampling.
//!
//! Every artifact is a pure function of an [`InstanceSpec`] and a seed. The
//! draw order below is part of the reproducibility contract:
//!
//! - rewards (stream [`streams::REWARDS`]): row-major over
//!   `(prompt, response)`, each `reward_scale · u` with `u` uniform on
//!   `[-1, 1)`;
//! - features (stream [`streams::FEATURES`]): per prompt, first the shared
//!   vector `g_x` (`d` draws), then one private vector per response
//!   (`d` draws each), all uniform on `[-1, 1)`;
//! - preference pairs (stream [`streams::PAIRS`]): per pair, a prompt
//!   index, a distinct response pair `(a, b)`, then one uniform label draw.
//!
//! Preference labels follow the Bradley–Terry convention
//! `P(a ≻ b) = σ(r(x,a) − r(x,b))`, matching the sigmoid structure of the
//! pairwise losses. That is a modeling convention of this generator, not a
//! property of the losses themselves.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::sigmoid;
use crate::oracle::{OracleError, RewardModel};
use crate::policy::ReferencePolicy;
use crate::rng::{streams, CounterRng};
use crate::types::{CoreError, PreferencePair, PromptId, ResponseId};

/// Bumped whenever generated bytes would change for the same spec.
pub const GENERATOR_VERSION: &str = "1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("instance needs at least 1 prompt and 2 responses, got {prompts}x{responses}")]
    BadShape { prompts: usize, responses: usize },
    #[error("reward_scale must be finite and non-negative, got {0}")]
    BadRewardScale(f64),
    #[error("feature_collision must lie in [0, 1], got {0}")]
    BadCollision(f64),
    #[error("feature_dim must be positive when features are requested")]
    BadFeatureDim,
    #[error("n_pairs must be positive")]
    NoPairs,
    #[error("pair {index} is invalid: {source}")]
    InvalidPair { index: usize, source: CoreError },
    #[error("dataset JSONL line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Everything needed to regenerate one synthetic instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub n_prompts: usize,
    pub n_responses: usize,
    /// Half-width of the uniform reward distribution.
    pub reward_scale: f64,
    pub seed: u64,
    /// Per-block feature dimension; `None` skips feature generation.
    #[serde(default)]
    pub feature_dim: Option<usize>,
    /// Fraction of feature mass shared between each prompt's designated
    /// winner (response 0) and loser (response 1). At 0 the two responses
    /// live in disjoint feature blocks; at 1 their features are identical.
    #[serde(default)]
    pub feature_collision: f64,
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_prompts < 1 || self.n_responses < 2 {
            return Err(DatagenError::BadShape {
                prompts: self.n_prompts,
                responses: self.n_responses,
            });
        }
        if !(self.reward_scale.is_finite() && self.reward_scale >= 0.0) {
            return Err(DatagenError::BadRewardScale(self.reward_scale));
        }
        if !(0.0..=1.0).contains(&self.feature_collision) {
            return Err(DatagenError::BadCollision(self.feature_collision));
        }
        if self.feature_dim == Some(0) {
            return Err(DatagenError::BadFeatureDim);
        }
        Ok(())
    }
}

/// Feature vectors for a linear policy, in the block layout described on
/// [`gen_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// Total weight dimension.
    pub dim: usize,
    /// `vectors[prompt][response]`, each of length `dim`.
    pub vectors: Vec<Vec<Vec<f64>>>,
}

/// A generated instance: ground-truth rewards, frozen reference, and
/// optionally a feature map for the linear policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub spec: InstanceSpec,
    pub reward: RewardModel,
    pub reference: ReferencePolicy,
    pub features: Option<FeatureMap>,
}

/// Generates an instance from its spec.
///
/// The reference policy is uniform. Features, when requested with
/// per-block dimension `d`, use disjoint blocks inside a weight vector of
/// total dimension `d·(n_prompts·n_responses + n_prompts)`:
///
/// - every response has a private block at offset
///   `d·(prompt·n_responses + response)`;
/// - every prompt has a shared block at offset
///   `d·(n_prompts·n_responses + prompt)`.
///
/// With collision fraction `c`, responses 0 and 1 of each prompt carry
/// `(1−c)`-scaled private draws plus `c·g_x` in the shared block; other
/// responses carry unscaled private draws only. At `c = 0` all responses
/// are independently controllable (tabular-equivalent); at `c = 1` the
/// designated pair's features coincide, so no weight vector can move their
/// probability ratio.
pub fn gen_instance(spec: &InstanceSpec) -> Result<Instance, DatagenError> {
    spec.validate()?;
    let mut reward_rng = CounterRng::stream(spec.seed, streams::REWARDS);
    let rewards = (0..spec.n_prompts)
        .map(|_| {
            (0..spec.n_responses)
                .map(|_| spec.reward_scale * reward_rng.next_symmetric())
                .collect()
        })
        .collect();
    let reward = RewardModel::new(rewards)?;
    let reference = ReferencePolicy::uniform(spec.n_prompts, spec.n_responses);

    let features = match spec.feature_dim {
        None => None,
        Some(d) => {
            let c = spec.feature_collision;
            let mut rng = CounterRng::stream(spec.seed, streams::FEATURES);
            let dim = d * (spec.n_prompts * spec.n_responses + spec.n_prompts);
            let shared_base = d * spec.n_prompts * spec.n_responses;
            let mut vectors = Vec::with_capacity(spec.n_prompts);
            for x in 0..spec.n_prompts {
                let g: Vec<f64> = (0..d).map(|_| rng.next_symmetric()).collect();
                let mut prompt_vecs = Vec::with_capacity(spec.n_responses);
                for y in 0..spec.n_responses {
                    let mut phi = vec![0.0; dim];
                    let private_base = d * (x * spec.n_responses + y);
                    let private_scale = if y < 2 { 1.0 - c } else { 1.0 };
                    for j in 0..d {
                        phi[private_base + j] = private_scale * rng.next_symmetric();
                    }
                    if y < 2 {
                        for j in 0..d {
                            phi[shared_base + d * x + j] = c * g[j];
                        }
                    }
                    prompt_vecs.push(phi);
                }
                vectors.push(prompt_vecs);
            }
            Some(FeatureMap { dim, vectors })
        }
    };

    Ok(Instance {
        spec: *spec,
        reward,
        reference,
        features,
    })
}

/// How a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Spec of the generating instance; `None` for hand-built datasets.
    pub instance: Option<InstanceSpec>,
    pub pair_seed: u64,
    pub n_pairs: usize,
    pub generator_version: String,
}

/// A sequence of preference comparisons plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub provenance: Provenance,
}

impl PreferenceDataset {
    /// Wraps hand-built pairs, validating them against a prompt/response
    /// grid.
    pub fn manual(
        pairs: Vec<PreferencePair>,
        n_prompts: usize,
        n_responses: usize,
    ) -> Result<Self, DatagenError> {
        for (index, pair) in pairs.iter().enumerate() {
            if pair.prompt.0 >= n_prompts
                || pair.winner.0 >= n_responses
                || pair.loser.0 >= n_responses
            {
                return Err(DatagenError::InvalidPair {
                    index,
                    source: CoreError::MissingId {
                        prompt: pair.prompt.0,
                        response: pair.winner.0.max(pair.loser.0),
                    },
                });
            }
            if pair.winner == pair.loser {
                return Err(DatagenError::InvalidPair {
                    index,
                    source: CoreError::WinnerEqualsLoser {
                        prompt: pair.prompt.0,
                        response: pair.winner.0,
                    },
                });
            }
        }
        let n_pairs = pairs.len();
        Ok(Self {
            pairs,
            provenance: Provenance {
                instance: None,
                pair_seed: 0,
                n_pairs,
                generator_version: "manual".to_string(),
            },
        })
    }

    /// One pair per line: `{"prompt": int, "winner": int, "loser": int}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for pair in &self.pairs {
            out.push_str(&serde_json::to_string(pair).expect("pairs always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, provenance: Provenance) -> Result<Self, DatagenError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: PreferencePair =
                serde_json::from_str(line).map_err(|e| DatagenError::Jsonl {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if pair.winner == pair.loser {
                return Err(DatagenError::Jsonl {
                    line: i + 1,
                    message: "winner equals loser".to_string(),
                });
            }
            pairs.push(pair);
        }
        Ok(Self { pairs, provenance })
    }
}

/// Samples `n_pairs` comparisons from a reward table under the
/// Bradley–Terry convention: prompt uniform, two distinct responses
/// uniform, and the first response wins with probability `σ(r_a − r_b)`.
pub fn sample_preferences(
    reward: &RewardModel,
    n_pairs: usize,
    seed: u64,
) -> Result<PreferenceDataset, DatagenError> {
    sample_with_instance(reward, n_pairs, seed, None)
}

/// [`sample_preferences`] with the generating instance recorded in the
/// provenance.
pub fn sample_preferences_from(
    instance: &Instance,
    n_pairs: usize,
    seed: u64,
) -> Result<PreferenceDataset, DatagenError> {
    sample_with_instance(&instance.reward, n_pairs, seed, Some(instance.spec))
}

fn sample_with_instance(
    reward: &RewardModel,
    n_pairs: usize,
    seed: u64,
    instance: Option<InstanceSpec>,
) -> Result<PreferenceDataset, DatagenError> {
    if n_pairs == 0 {
        return Err(DatagenError::NoPairs);
    }
    let n_prompts = reward.n_prompts();
    let mut rng = CounterRng::stream(seed, streams::PAIRS);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x = rng.next_index(n_prompts);
        let prompt = PromptId(x);
        let n_responses = reward.n_responses(prompt);
        if n_responses < 2 {
            return Err(DatagenError::BadShape {
                prompts: n_prompts,
                responses: n_responses,
            });
        }
        let (a, b) = rng.next_distinct_pair(n_responses);
        let ra = reward.reward(prompt, ResponseId(a))?;
        let rb = reward.reward(prompt, ResponseId(b))?;
        let a_wins = rng.next_f64() < sigmoid(ra - rb);
        let (winner, loser) = if a_wins { (a, b) } else { (b, a) };
        pairs.push(PreferencePair {
            prompt,
            winner: ResponseId(winner),
            loser: ResponseId(loser),
        });
    }
    Ok(PreferenceDataset {
        pairs,
        provenance: Provenance {
            instance,
            pair_seed: seed,
            n_pairs,
            generator_version: GENERATOR_VERSION.to_string(),
        },
    })
}

/// The probe's fixed training set: for every prompt, the designated pair
/// `(response 0 ≻ response 1)` — the pair whose features collide.
pub fn designated_pairs(n_prompts: usize) -> Vec<PreferencePair> {
    (0..n_prompts)
        .map(|x| PreferencePair {
            prompt: PromptId(x),
            winner: ResponseId(0),
            loser: ResponseId(1),
        })
        .collect()
}

/// Manifest written alongside generated artifacts: the full spec plus a
/// digest over the serialized bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub spec: InstanceSpec,
    pub generator_version: String,
    /// Hex SHA-256 over rewards CSV, reference JSON, dataset JSONL, and
    /// features JSON (when present), concatenated in that order.
    pub content_digest: String,
}

pub fn instance_manifest(instance: &Instance, dataset: &PreferenceDataset) -> InstanceManifest {
    let mut hasher = Sha256::new();
    hasher.update(instance.reward.to_csv().as_bytes());
    hasher.update(instance.reference.to_document().to_json().as_bytes());
    hasher.update(dataset.to_jsonl().as_bytes());
    if let Some(features) = &instance.features {
        hasher.update(
            serde_json::to_string(features)
                .expect("features always serialize")
                .as_bytes(),
        );
    }
    let digest = hasher.finalize();
    InstanceManifest {
        spec: instance.spec,
        generator_version: GENERATOR_VERSION.to_string(),
        content_digest: hex_string(&digest),
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LinearFeaturePolicy, PolicyView};

    fn spec(seed: u64) -> InstanceSpec {
        InstanceSpec {
            n_prompts: 3,
            n_responses: 4,
            reward_scale: 1.0,
            seed,
            feature_dim: None,
            feature_collision: 0.0,
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let s = spec(42);
        let a = gen_instance(&s).unwrap();
        let b = gen_instance(&s).unwrap();
        assert_eq!(a.reward.to_csv(), b.reward.to_csv());
        let da = sample_preferences_from(&a, 50, 42).unwrap();
        let db = sample_preferences_from(&b, 50, 42).unwrap();
        assert_eq!(da.to_jsonl(), db.to_jsonl());
        assert_eq!(
            instance_manifest(&a, &da).content_digest,
            instance_manifest(&b, &db).content_digest
        );
    }

    #[test]
    fn different_seeds_change_the_digest() {
        let a = gen_instance(&spec(1)).unwrap();
        let b = gen_instance(&spec(2)).unwrap();
        let da = sample_preferences_from(&a, 20, 1).unwrap();
        let db = sample_preferences_from(&b, 20, 1).unwrap();
        assert_ne!(
            instance_manifest(&a, &da).content_digest,
            instance_manifest(&b, &db).content_digest
        );
    }

    #[test]
    fn zero_reward_scale_yields_all_zero_rewards() {
        let s = InstanceSpec {
            reward_scale: 0.0,
            ..spec(7)
        };
        let instance = gen_instance(&s).unwrap();
        assert!(instance.reward.rows().iter().flatten().all(|&r| r == 0.0));
    }

    #[test]
    fn full_collision_makes_the_designated_ratio_invariant() {
        let s = InstanceSpec {
            n_prompts: 2,
            n_responses: 3,
            reward_scale: 1.0,
            seed: 11,
            feature_dim: Some(1),
            feature_collision: 1.0,
        };
        let instance = gen_instance(&s).unwrap();
        let features = instance.features.unwrap();
        for prompt_vecs in &features.vectors {
            assert_eq!(prompt_vecs[0], prompt_vecs[1]);
        }
        // Probability ratio of the designated pair stays fixed under any
        // weight update.
        let policy = LinearFeaturePolicy::zeroed(features.vectors.clone(), features.dim).unwrap();
        let mut rng = CounterRng::new(5);
        let mut current = policy;
        for _ in 0..100 {
            let dir: Vec<f64> = (0..features.dim).map(|_| rng.next_symmetric()).collect();
            current = current.apply_update(&dir, 0.3).unwrap();
            let table = current.log_probs().unwrap();
            for x in 0..2 {
                let lw = table.log_prob(PromptId(x), ResponseId(0)).unwrap();
                let ll = table.log_prob(PromptId(x), ResponseId(1)).unwrap();
                assert!((lw - ll).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_collision_keeps_private_blocks_disjoint() {
        let s = InstanceSpec {
            n_prompts: 1,
            n_responses: 3,
            reward_scale: 1.0,
            seed: 11,
            feature_dim: Some(2),
            feature_collision: 0.0,
        };
        let features = gen_instance(&s).unwrap().features.unwrap();
        let vecs = &features.vectors[0];
        for (i, a) in vecs.iter().enumerate() {
            for b in vecs.iter().skip(i + 1) {
                let overlap: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert_eq!(overlap, 0.0);
            }
        }
    }

    #[test]
    fn label_frequency_matches_the_sigmoid_of_the_gap() {
        // Two responses with known reward gaps; compare empirical winner
        // frequency to sigma(gap) within 3 binomial standard errors.
        for (gap, n) in [(0.0, 20_000usize), (2.0, 20_000)] {
            let reward = RewardModel::new(vec![vec![gap, 0.0]]).unwrap();
            let dataset = sample_preferences(&reward, n, 99).unwrap();
            let wins = dataset
                .pairs
                .iter()
                .filter(|p| p.winner == ResponseId(0))
                .count();
            let freq = wins as f64 / n as f64;
            let p = sigmoid(gap);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "gap={gap}: freq={freq}, expected {p} ± {}",
                3.0 * se
            );
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_seed_sensitive() {
        let reward = gen_instance(&spec(3)).unwrap().reward;
        let a = sample_preferences(&reward, 100, 5).unwrap();
        let b = sample_preferences(&reward, 100, 5).unwrap();
        let c = sample_preferences(&reward, 100, 6).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn sampled_pairs_are_valid() {
        let instance = gen_instance(&spec(13)).unwrap();
        let dataset = sample_preferences_from(&instance, 500, 13).unwrap();
        for pair in &dataset.pairs {
            assert!(pair.prompt.0 < 3);
            assert!(pair.winner.0 < 4 && pair.loser.0 < 4);
            assert_ne!(pair.winner, pair.loser);
        }
        assert_eq!(dataset.provenance.instance, Some(instance.spec));
    }

    #[test]
    fn jsonl_round_trips() {
        let instance = gen_instance(&spec(21)).unwrap();
        let dataset = sample_preferences_from(&instance, 25, 21).unwrap();
        let text = dataset.to_jsonl();
        assert!(text.lines().next().unwrap().starts_with("{\"prompt\":"));
        let back = PreferenceDataset::from_jsonl(&text, dataset.provenance.clone()).unwrap();
        assert_eq!(back, dataset);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let bad = InstanceSpec {
            n_responses: 1,
            ..spec(0)
        };
        assert!(matches!(
            gen_instance(&bad),
            Err(DatagenError::BadShape { .. })
        ));
        let bad = InstanceSpec {
            feature_collision: 1.5,
            ..spec(0)
        };
        assert!(matches!(
            gen_instance(&bad),
            Err(DatagenError::BadCollision(_))
        ));
        let bad = InstanceSpec {
            feature_dim: Some(0),
            ..spec(0)
        };
        assert!(matches!(
            gen_instance(&bad),
            Err(DatagenError::BadFeatureDim)
        ));
        let reward = RewardModel::new(vec![vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            sample_preferences(&reward, 0, 1),
            Err(DatagenError::NoPairs)
        ));
    }

    #[test]
    fn manual_datasets_validate_pairs() {
        let pairs = designated_pairs(2);
        let ds = PreferenceDataset::manual(pairs, 2, 3).unwrap();
        assert_eq!(ds.pairs.len(), 2);
        assert_eq!(ds.provenance.generator_version, "manual");

        let bad = designated_pairs(3);
        assert!(matches!(
            PreferenceDataset::manual(bad, 2, 3),
            Err(DatagenError::InvalidPair { .. })
        ));
    }
}
