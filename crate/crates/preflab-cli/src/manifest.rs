//! Run manifests. Every command writes `manifest.json` before its outputs
//! are finalized; replaying a manifest re-executes the recorded, fully
//! resolved configuration and reproduces the CSV outputs byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use preflab::datagen::InstanceSpec;
use preflab::experiments::{OracleCheckConfig, SweepOperatingPoint};
use preflab::losses::LossSpec;
use preflab::trainer::TrainConfig;

use crate::errors::CliError;

pub const NOTE_HYPERPARAMETERS: &str =
    "all training hyperparameters are artifact choices, not values taken from reference results";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: CommandSpec,
    pub seeds: Vec<u64>,
    pub hyperparameter_note: String,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<OutputEntry>,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

/// Fully resolved configuration of one command; the replayable payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum CommandSpec {
    Gen(GenSpec),
    Losscurve(LosscurveSpec),
    Gradsweep(GradsweepSpec),
    Gradcheck(GradcheckSpec),
    OracleCheck(OracleCheckSpec),
    Train(TrainCmdSpec),
    Hackprobe(HackprobeSpec),
}

impl CommandSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            CommandSpec::Gen(s) => vec![s.instance.seed, s.pair_seed],
            CommandSpec::Losscurve(_) | CommandSpec::Gradsweep(_) | CommandSpec::Gradcheck(_) => {
                Vec::new()
            }
            CommandSpec::OracleCheck(s) => vec![s.check.instance.seed],
            CommandSpec::Train(s) => {
                let mut seeds = vec![s.instance.seed];
                if let DatasetSource::Sampled { pair_seed, .. } = s.dataset {
                    seeds.push(pair_seed);
                }
                seeds
            }
            CommandSpec::Hackprobe(s) => vec![s.instance.seed],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenSpec {
    pub instance: InstanceSpec,
    pub n_pairs: usize,
    pub pair_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LosscurveSpec {
    pub losses: Vec<LossSpec>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradsweepSpec {
    pub losses: Vec<LossSpec>,
    pub pi_l_min: f64,
    pub pi_l_max: f64,
    pub points: usize,
    pub operating_point: SweepOperatingPoint,
    pub fit_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradcheckSpec {
    pub losses: Vec<LossSpec>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleCheckSpec {
    pub check: OracleCheckConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Bradley–Terry samples from the instance's rewards.
    Sampled { n_pairs: usize, pair_seed: u64 },
    /// The fixed designated pair `(0 ≻ 1)` for every prompt.
    Designated,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainCmdSpec {
    pub instance: InstanceSpec,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    /// 0 keeps the uniform initialization; > 0 draws seeded scores on
    /// `[-scale, scale)`.
    pub init_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HackprobeSpec {
    /// Base instance; `feature_collision` is overridden per run.
    pub instance: InstanceSpec,
    pub collisions: Vec<f64>,
    pub losses: Vec<LossSpec>,
    pub learning_rate: f64,
    pub steps: usize,
    pub log_every: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::new_with_prefix(bytes).finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: CommandSpec, input_digests: BTreeMap<String, String>) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: command.seeds(),
            command,
            hyperparameter_note: NOTE_HYPERPARAMETERS.to_string(),
            input_digests,
            outputs: Vec::new(),
            duration_ms: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("cannot parse manifest {}: {e}", path.display())))
    }
}
