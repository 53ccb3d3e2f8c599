//! Experiment driver: TOML configuration, checkpoints and the report layout
//! behind the `hashvfl` binary.

pub mod checkpoint;
pub mod config;
pub mod harness;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION};
pub use config::{ConfigError, ExperimentConfig};
