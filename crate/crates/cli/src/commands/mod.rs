pub mod metrics;
pub mod plan;
pub mod report;
pub mod shuffle;
pub mod simulate;
pub mod verify;

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::config::{self, Scenario};
use crate::{CliError, ConfigError, Format};

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub format: Format,
}

impl Context {
    /// Loads the scenario named by `--config`, with its raw bytes.
    pub fn scenario(&self) -> Result<(Scenario, Vec<u8>), CliError> {
        let path = self.config.as_ref().ok_or_else(|| {
            CliError::Config(ConfigError {
                key: String::new(),
                message: "--config is required for this command".into(),
            })
        })?;
        Ok(config::load(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
