use std::io;
use std::path::PathBuf;

/// Failures of the file and command layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] opl_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Configuration or schema violation.
    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use opl_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(e) if e.is_numerical() => exit::NUMERICAL,
            CliError::Core(E::InvalidArgument(_) | E::Placement { .. } | E::SampleSize { .. }) => {
                exit::CONFIG
            }
            _ => exit::RUNTIME,
        }
    }
}
