use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank-deficient input: column {column} has |r_jj| = {magnitude:e} (tolerance {tolerance:e})")]
    RankDeficient {
        column: usize,
        magnitude: f64,
        tolerance: f64,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("degenerate labels in {0}: both classes are required")]
    DegenerateLabels(&'static str),

    #[error("invalid placement {text:?}: {reason}")]
    Placement { text: String, reason: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: total loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("gradient check failed before training: max relative error {max_rel_error:e}")]
    GradientCheck { max_rel_error: f64 },

    #[error("sample size {n} too small, need at least {required}")]
    SampleSize { n: usize, required: usize },

    #[error("cost delta must be positive, got {0}")]
    NonpositiveCostDelta(f64),

    #[error("tape: {0}")]
    Tape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }

    /// True for failures of the numerics (divergence, rank loss) as
    /// opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::NonFinite(_)
                | Error::Divergence { .. }
                | Error::GradientCheck { .. }
        )
    }
}

pub type Result<T> = core::result::Result<T, Error>;
