//! Scenario runner behind the `multipod` binary.
//!
//! Exit codes: 0 when every check passes, 1 when a verification fails,
//! 2 for configuration or input errors.

use std::fmt;
use std::io;

pub mod commands;
pub mod config;
pub mod output;

pub use config::{ConfigError, Scenario};
pub use output::{Format, Grid};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Input(String),
    Io(io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        2
    }

    /// Library error raised while acting on the config entry `key`.
    pub fn at(key: &str, e: multipod::Error) -> Self {
        CliError::Config(ConfigError {
            key: key.into(),
            message: e.to_string(),
        })
    }
}

/// `Ok(true)` when all checks passed.
pub type Outcome = Result<bool, CliError>;
