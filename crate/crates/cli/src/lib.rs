//! Command-line client: key and address management, sending and reading
//! mail against a locally persisted node, scenario-driven simulation,
//! proof-of-work benchmarking, and the spam-economics calculator.

pub mod bench;
pub mod commands;
pub mod economics;
pub mod profile;
pub mod world;

use dpush_core::dmail::DmailError;
use dpush_core::dpush::DpushError;
use dpush_core::routing::DhtError;
use dpush_core::simnet::{ScenarioError, SimError};
use thiserror::Error;

pub use commands::{run, Cli};

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("network: {0}")]
    Network(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Network(_) => 4,
        }
    }

    /// Single line, suitable for scripts.
    pub fn line(&self) -> String {
        format!("error: {self}").replace(['\n', '\r'], " ")
    }
}

impl From<DhtError> for CliError {
    fn from(e: DhtError) -> Self {
        match e {
            DhtError::StoreFailed { reason: Some(_) } => CliError::Protocol(e.to_string()),
            _ => CliError::Network(e.to_string()),
        }
    }
}

impl From<DpushError> for CliError {
    fn from(e: DpushError) -> Self {
        match e {
            DpushError::NotFound => CliError::Network("address not found".into()),
            DpushError::Dht(d) => d.into(),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<DmailError> for CliError {
    fn from(e: DmailError) -> Self {
        match e {
            DmailError::Dpush(d) => d.into(),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        fn class(e: &ScenarioError) -> fn(String) -> CliError {
            match e {
                ScenarioError::Action { source, .. } => class(source),
                ScenarioError::Parse(_) | ScenarioError::Sim(SimError::InvalidConfig(_)) => CliError::Usage,
                ScenarioError::Sim(SimError::Dht(_)) => CliError::Network,
                _ => CliError::Protocol,
            }
        }
        class(&e)(e.to_string())
    }
}
