//! Files, experiment drivers and the command line around `opl-core`.

// `!(x > 0.0)` is the NaN-rejecting form of a positivity check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod hash;
pub mod report;
pub mod sweep;

pub use error::{CliError, Result};
