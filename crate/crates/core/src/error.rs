use std::io;

use thiserror::Error;

/// Errors raised by the refinement engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{matrix} row {row} has near-zero norm ({norm:e})")]
    ZeroNormRow {
        matrix: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("grid {grid_h}x{grid_w} does not cover {nodes} nodes")]
    GridMismatch {
        grid_h: usize,
        grid_w: usize,
        nodes: usize,
    },

    #[error("row {row} sums to {sum:e} after clamping; cannot normalize")]
    DegenerateRow { row: usize, sum: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("cannot fuse heads with mixed representations ({first} and {other})")]
    MixedRepresentation {
        first: &'static str,
        other: &'static str,
    },

    #[error("row {row} is not a probability distribution: {reason}")]
    NotAProbability { row: usize, reason: String },

    #[error("linear system of size {size} is numerically singular")]
    SingularSystem { size: usize },

    #[error("iterate at step {step} contains non-finite values")]
    NonFiniteIterate { step: usize },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        reason: &'static str,
    },

    #[error("invalid features: {0}")]
    InvalidFeatures(String),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionUnsupported { found: u32, supported: u32 },

    #[error("corrupt payload in {field}: {detail}")]
    CorruptPayload { field: &'static str, detail: String },

    #[error("inconsistent header field {field}: {detail}")]
    InconsistentHeader { field: &'static str, detail: String },

    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

impl Error {
    /// Variant name, used as the machine-readable error tag on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ZeroNormRow { .. } => "ZeroNormRow",
            Error::GridMismatch { .. } => "GridMismatch",
            Error::DegenerateRow { .. } => "DegenerateRow",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::MixedRepresentation { .. } => "MixedRepresentation",
            Error::NotAProbability { .. } => "NotAProbability",
            Error::SingularSystem { .. } => "SingularSystem",
            Error::NonFiniteIterate { .. } => "NonFiniteIterate",
            Error::InvalidParameter { .. } => "InvalidParameter",
            Error::InvalidFeatures(_) => "InvalidFeatures",
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionUnsupported { .. } => "VersionUnsupported",
            Error::CorruptPayload { .. } => "CorruptPayload",
            Error::InconsistentHeader { .. } => "InconsistentHeader",
            Error::IoFailure(_) => "IoFailure",
        }
    }

    pub(crate) fn invalid(name: &'static str, value: impl ToString, reason: &'static str) -> Self {
        Error::InvalidParameter {
            name,
            value: value.to_string(),
            reason,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
