//! Error-to-exit-code mapping. The contract: 0 success, 1 tolerance
//! violation, 2 configuration error, 3 numeric failure.

use preflab::datagen::DatagenError;
use preflab::experiments::ExperimentError;
use preflab::gradcheck::GradCheckError;
use preflab::losses::LossError;
use preflab::oracle::OracleError;
use preflab::policy::PolicyError;
use preflab::trainer::TrainError;
use preflab::types::CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn core_is_numeric(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::NonFinite { .. } | CoreError::NotNormalized { .. }
    )
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        if core_is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match &e {
            LossError::ExpOverflow { .. } => CliError::Numeric(e.to_string()),
            LossError::Core(c) if core_is_numeric(c) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match &e {
            OracleError::ExpOverflow { .. } | OracleError::NonFiniteReward { .. } => {
                CliError::Numeric(e.to_string())
            }
            OracleError::Core(c) if core_is_numeric(c) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match &e {
            PolicyError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            PolicyError::Core(c) if core_is_numeric(c) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Oracle(o) => o.into(),
            DatagenError::Core(c) => c.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Loss(l) => l.into(),
            TrainError::Policy(p) => p.into(),
            TrainError::Core(c) => c.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GradCheckError> for CliError {
    fn from(e: GradCheckError) -> Self {
        match e {
            GradCheckError::NonFiniteEval { .. } => CliError::Numeric(e.to_string()),
            GradCheckError::Loss(l) => l.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => CliError::Config(m),
            ExperimentError::Loss(l) => l.into(),
            ExperimentError::Oracle(o) => o.into(),
            ExperimentError::Datagen(d) => d.into(),
            ExperimentError::Policy(p) => p.into(),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Core(c) => c.into(),
        }
    }
}
