//! JSON checkpoints holding a trained system together with its configuration.

use std::path::{Path, PathBuf};

use hashvfl::protocol::{TrainLog, VflSystem};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("no checkpoint at {0}; run `hashvfl train` first")]
    Missing(PathBuf),
    #[error("reading {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("decoding {path}")]
    Decode {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path} has format version {found}, expected {FORMAT_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path} holds an inconsistent system")]
    Corrupt { path: PathBuf, source: hashvfl::Error },
    #[error("checkpoint uses {found}-bit codes but {expected} bits were requested")]
    CodeLength { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub system: VflSystem,
    pub train_log: TrainLog,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, system: VflSystem, train_log: TrainLog) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config.hash(),
            config,
            system,
            train_log,
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        if !path.exists() {
            return Err(CheckpointError::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Self = serde_json::from_str(&text).map_err(|source| CheckpointError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                path: path.to_path_buf(),
                found: ck.format_version,
            });
        }
        ck.system.validate().map_err(|source| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(ck)
    }

    pub fn expect_code_length(&self, expected: usize) -> Result<(), CheckpointError> {
        let found = self.system.code_length();
        if found == expected {
            Ok(())
        } else {
            Err(CheckpointError::CodeLength { expected, found })
        }
    }
}
