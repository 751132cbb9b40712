// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipelines behind the `mindpatch` command line: corpus generation,
//! pretraining, causal tracing, steering, generation and probing. Each
//! command reads a TOML config, works inside one output directory and leaves
//! a run manifest with file digests behind.

pub mod commands;
pub mod config;
pub mod scoring;
pub mod store;

use thiserror::Error;

pub use commands::{run, Command, Options};
pub use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Core(#[from] mindpatch::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 for violated
    /// contracts (bad inputs, digest mismatches, locked directories), 1 for
    /// anything environmental.
    pub fn exit_code(&self) -> i32 {
        use mindpatch::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Contract(_)
            | CliError::Core(E::Contract(_) | E::Shape { .. } | E::OutOfRange { .. } | E::Format(_)) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
