use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RkdError>;

#[derive(Debug, Error)]
pub enum RkdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no grid cell has at least {min_count} samples in every season")]
    EmptyClassSet { min_count: usize },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("strategy syntax error at position {position}: {message}")]
    StrategySyntax { position: usize, message: String },

    #[error("strategy constraint violated: {0}")]
    StrategyConstraint(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("seed {seed}: {source}")]
    Seeded {
        seed: u64,
        #[source]
        source: Box<RkdError>,
    },
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Io,
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Io => 4,
            ErrorCategory::Runtime => 5,
        }
    }
}

impl RkdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RkdError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RkdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            RkdError::InvalidConfig(_)
            | RkdError::ConfigKey { .. }
            | RkdError::StrategySyntax { .. }
            | RkdError::StrategyConstraint(_) => ErrorCategory::Config,
            RkdError::EmptyClassSet { .. } | RkdError::Parse { .. } => ErrorCategory::Data,
            RkdError::Io { .. } => ErrorCategory::Io,
            RkdError::InvalidInput(_) | RkdError::UndefinedMetric(_) => ErrorCategory::Runtime,
            RkdError::Seeded { source, .. } => source.category(),
        }
    }
}
