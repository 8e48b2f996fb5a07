//! Experiment harness around `hydra-peft`: TOML configuration, the binary
//! checkpoint format, the pretrain → fine-tune → merge → analyze pipeline,
//! and the `hydra-peft` command line.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use checkpoint::{Checkpoint, Dtype};
pub use config::{ExperimentConfig, Variant};
pub use error::{CliError, CliResult};
