//! The run configuration document.
//!
//! ```json
//! { "schema_version": 1, "data": { .. }, "train": { .. }, "metrics": { .. } }
//! ```
//!
//! `schema_version` is required; sections and their fields fall back to
//! defaults; unknown keys anywhere are rejected.

use std::fs;
use std::path::Path;

use opl_core::metrics::{ArdOptions, ProbeOptions};
use opl_core::synth::SynthSpec;
use opl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub ard: ArdOptions,
    pub probe: ProbeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: SynthSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: SynthSpec::default(),
            train: TrainConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        let wrap = |e: opl_core::Error| CliError::Config(e.to_string());
        self.data.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        let p = &self.metrics.probe;
        if !(p.split_frac > 0.0 && p.split_frac < 1.0) {
            return Err(CliError::Config(
                "metrics.probe.split_frac must lie in (0, 1)".into(),
            ));
        }
        let a = &self.metrics.ard;
        if a.bins < 2 || !(a.eps > 0.0) {
            return Err(CliError::Config(
                "metrics.ard needs bins >= 2 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "train": {"lamda_face": 0.1}}"#)
            .unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("lamda_face"), "{}", err);
        assert_eq!(err.exit_code(), crate::error::exit::CONFIG);
    }

    #[test]
    fn missing_version_and_bad_values() {
        assert!(RunConfig::from_json("{}").is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(
            RunConfig::from_json(r#"{"schema_version": 1, "train": {"placement": "G4O0"}}"#)
                .is_err()
        );
        assert!(
            RunConfig::from_json(r#"{"schema_version": 1, "train": {"placement": "X"}}"#).is_err()
        );
        assert!(
            RunConfig::from_json(r#"{"schema_version": 1, "data": {"t": 60, "s": 10}}"#).is_err()
        );
    }

    #[test]
    fn fields_parse() {
        let cfg = RunConfig::from_json(
            r#"{"schema_version": 1,
                "train": {"placement": "G1O1", "k_gopl": 4, "mode": "direct_q",
                          "optimizer": "sgd_momentum", "activation": "relu"},
                "metrics": {"ard": {"bins": 16}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.placement.to_string(), "G1O1");
        assert_eq!(cfg.train.k_gopl, Some(4));
        assert_eq!(cfg.metrics.ard.bins, 16);
        assert_eq!(cfg.metrics.ard.eps, 1e-6);
    }
}
