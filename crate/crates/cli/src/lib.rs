//! Command implementations and the experiment configuration file for the
//! `crossfuse` binary.

pub mod commands;
pub mod config;

pub use commands::{Globals, UsageError, VerificationFailed};
pub use config::ExperimentConfig;
