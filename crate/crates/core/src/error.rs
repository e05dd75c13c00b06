//! Crate-wide error type.

use thiserror::Error;

/// Pixel counts per masking stage, reported when estimation runs out of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCounts {
    /// Pixels in the frame.
    pub total: usize,
    /// Pixels whose full stencil footprint is valid.
    pub valid_input: usize,
    /// Pixels surviving the denominator guard.
    pub after_denominator: usize,
    /// Pixels surviving the ratio clamp.
    pub after_clamp: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("insufficient history: frame {frame} needs {required} prior frames")]
    History { frame: usize, required: usize },

    #[error("field has no unmasked pixels")]
    EmptyField,

    #[error("degenerate attention: uniform activity field, weights carry no information")]
    DegenerateAttention,

    #[error(
        "estimation impossible: no pixels survive masking \
         (total {}, valid {}, after denominator guard {}, after clamp {})",
        .0.total, .0.valid_input, .0.after_denominator, .0.after_clamp
    )]
    EstimationImpossible(StageCounts),

    #[error("unstable configuration: {required} substeps per sample period required (cap {cap})")]
    Stability { required: usize, cap: usize },

    #[error("infeasible parameter: {0}")]
    Infeasible(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error in {file}: {message}")]
    Ingest { file: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 parameter/validation, 3 data/format,
    /// 4 estimation impossible.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::GridMismatch(_)
            | Error::Parameter(_)
            | Error::Dimension(_)
            | Error::History { .. }
            | Error::Stability { .. }
            | Error::Infeasible(_) => 2,
            Error::Format { .. } | Error::Data(_) | Error::Ingest { .. } | Error::Io(_) => 3,
            Error::EmptyField | Error::DegenerateAttention | Error::EstimationImpossible(_) => 4,
        }
    }
}
