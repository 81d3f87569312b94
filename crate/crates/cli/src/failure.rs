//! Error classification behind the exit-code contract: 2 for configuration and
//! validation problems, 1 for everything that goes wrong while running.

use std::fmt;

use pta_core::data::DataError;
use pta_core::metrics::MetricsError;
use pta_core::nets::{CheckpointError, NetError};
use pta_core::training::TrainError;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    /// Prefixes the message, keeping the class.
    pub fn context(self, what: &str) -> Self {
        match self {
            Failure::Config(m) => Failure::Config(format!("{what}: {m}")),
            Failure::Runtime(m) => Failure::Runtime(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match &e {
            // a missing input is a bad invocation rather than a failed run
            DataError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::IncompatibleSize { .. } | NetError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Net(n) => n.into(),
            TrainError::Config(_) | TrainError::Corruption(_) => Failure::Config(e.to_string()),
            TrainError::Loss(_) | TrainError::NonFinite { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Data(d) => d.into(),
            MetricsError::Checkpoint(c) => c.into(),
            MetricsError::Net(n) => n.into(),
            MetricsError::ExtractorMismatch { .. }
            | MetricsError::TooSmall { .. }
            | MetricsError::TooFew { .. }
            | MetricsError::Empty(_)
            | MetricsError::Invalid(_) => Failure::Config(e.to_string()),
            MetricsError::NonFinite(_) | MetricsError::Asymmetric(_) => Failure::Runtime(e.to_string()),
        }
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}
