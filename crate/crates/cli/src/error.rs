use dopra_core::metrics::MetricsError;
use dopra_core::model::trace::TraceError;
use dopra_core::model::ModelError;
use dopra_core::penalty::PenaltyError;
use dopra_core::response::ResponseError;
use dopra_core::scenario::ScenarioError;
use dopra_core::DecodeError;
use thiserror::Error;

/// Exit status: 1 for rejected input values, 2 for unreadable or malformed
/// files.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingStep { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PenaltyError> for CliError {
    fn from(e: PenaltyError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(m) => CliError::Invalid(m),
            DecodeError::Model(m) => m.into(),
            DecodeError::Penalty(p) => p.into(),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Model(m) => m.into(),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Empty => CliError::Invalid(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid(m) => CliError::Invalid(m),
            ScenarioError::Decode(d) => d.into(),
            ScenarioError::Model(m) => m.into(),
            ScenarioError::Trace(t) => t.into(),
            ScenarioError::Csv(c) => CliError::Io(c.to_string()),
        }
    }
}

impl From<ResponseError> for CliError {
    fn from(e: ResponseError) -> Self {
        match e {
            ResponseError::DimensionMismatch { .. } | ResponseError::Grid { .. } => {
                CliError::Invalid(e.to_string())
            }
            other => CliError::Io(other.to_string()),
        }
    }
}
