//! Report envelopes written by every command.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    /// Configuration the result was produced under.
    pub config: serde_json::Value,
    /// Hash of the input files.
    pub input_hash: String,
    pub result: T,
}

impl<'a, T: Serialize> Report<'a, T> {
    pub fn new(command: &'a str, config: serde_json::Value, input_hash: String, result: T) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command,
            config,
            input_hash,
            result,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}
