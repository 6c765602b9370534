//! The `abode` command line: prepare, train, eval, gradcheck and synth.
//!
//! Every command validates all of its inputs before writing anything, and
//! every output is a pure function of the manifest, the seeds and the input
//! files.

pub mod commands;
pub mod manifest;

use std::fmt;

use serde::Serialize;

pub use commands::{run, Cli, Command};
pub use manifest::{CaseEntry, Overrides, RunManifest};

/// A failed command. Printed to stderr as one JSON object.
#[derive(Clone, Debug, Serialize)]
pub struct CliError {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            error: kind,
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain strings serialize")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.error, self.message)?;
        for d in &self.details {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

impl From<abode_core::Error> for CliError {
    fn from(e: abode_core::Error) -> Self {
        use abode_core::Error as E;
        let kind = match &e {
            E::Input { .. } => "input",
            E::Io { .. } => "io",
            E::Data(_) => "data",
            E::Checkpoint(_) => "checkpoint",
            E::Diverged { .. } => "diverged",
            E::Json(_) => "json",
            E::Model(_) | E::Tensor(_) => "model",
        };
        CliError::new(kind, e.to_string())
    }
}
