use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no labeled cluster present")]
    NoLabeledCluster,
    #[error("expected {expected} anchors, got {got}")]
    AnchorCountMismatch { expected: usize, got: usize },
    #[error("instance {0} has no pixels")]
    EmptyInstance(u64),
    #[error("anchor set is empty")]
    EmptyAnchorSet,
    #[error("unlabeled region is empty")]
    EmptyUnlabeledRegion,
    #[error("label image contains no instances")]
    NoInstances,
    #[error("ground truth has no foreground pixels")]
    EmptyForeground,
    #[error("need at least {needed} pixels, got {got}")]
    TooFewPixels { needed: usize, got: usize },
    #[error("offset ({0}, {1}) does not fit the grid")]
    OffsetOutOfRange(i64, i64),
    #[error("scene is infeasible: {0}")]
    InfeasibleSpec(String),
    #[error("optimization diverged at step {step}: total loss {total}")]
    DivergenceDetected { step: usize, total: f64 },
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version or layout: {0}")]
    UnsupportedVersion(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("cannot encode: {0}")]
    Encode(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable identifier, used in `ERROR:<code>:` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::NonFiniteValue(_) => "NON_FINITE_VALUE",
            Error::InvalidLabel(_) => "INVALID_LABEL",
            Error::Domain(_) => "DOMAIN_ERROR",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::NoLabeledCluster => "NO_LABELED_CLUSTER",
            Error::AnchorCountMismatch { .. } => "ANCHOR_COUNT_MISMATCH",
            Error::EmptyInstance(_) => "EMPTY_INSTANCE",
            Error::EmptyAnchorSet => "EMPTY_ANCHOR_SET",
            Error::EmptyUnlabeledRegion => "EMPTY_UNLABELED_REGION",
            Error::NoInstances => "NO_INSTANCES",
            Error::EmptyForeground => "EMPTY_FOREGROUND",
            Error::TooFewPixels { .. } => "TOO_FEW_PIXELS",
            Error::OffsetOutOfRange(..) => "OFFSET_OUT_OF_RANGE",
            Error::InfeasibleSpec(_) => "INFEASIBLE_SPEC",
            Error::DivergenceDetected { .. } => "DIVERGENCE_DETECTED",
            Error::BadMagic { .. } => "BAD_MAGIC",
            Error::UnsupportedVersion(_) => "UNSUPPORTED_VERSION",
            Error::TruncatedFile(_) => "TRUNCATED_FILE",
            Error::Encode(_) => "ENCODE_ERROR",
            Error::Config(_) => "CONFIG_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }

    /// Whether the error came from the filesystem or a file's contents
    /// rather than from invalid arguments.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::TruncatedFile(_)
                | Error::Encode(_)
        )
    }
}
