//! Scenario runner, offline tools and the telemetry service around the
//! maglev twin.

pub mod bench;
pub mod capability;
pub mod config;
pub mod protocol;
pub mod scenario;
pub mod server;
pub mod service;

use std::path::Path;

use thiserror::Error;

pub use config::{load_config, parse_config, HarnessConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{file}: {inner}")]
    InFile {
        file: String,
        inner: Box<HarnessError>,
    },
    #[error(transparent)]
    Config(#[from] maglev_core::control::ConfigError),
    #[error(transparent)]
    Control(#[from] maglev_core::control::ControlError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unknown scenario {0:?}; expected a file or one of: {1}")]
    UnknownScenario(String, String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn parse(e: serde_json::Error) -> Self {
        HarnessError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }

    pub fn in_file(self, path: &Path) -> Self {
        match self {
            e @ HarnessError::Io { .. } => e,
            e => HarnessError::InFile {
                file: path.display().to_string(),
                inner: Box::new(e),
            },
        }
    }
}
