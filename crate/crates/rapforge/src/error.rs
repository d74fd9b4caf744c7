//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target label equals clean label ({0}) in targeted loss")]
    TargetEqualsLabel(usize),

    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),

    #[error("unknown synthetic domain {0:?}")]
    UnknownDomain(String),

    #[error("weight file magic mismatch")]
    MagicMismatch,

    #[error("weight file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("weight file malformed: {0}")]
    MalformedWeightFile(String),

    #[error("parameter {name:?}: shape mismatch on load (expected {expected:?}, got {got:?})")]
    ParamShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("parameter set mismatch on load: {0}")]
    ParamSetMismatch(String),

    #[error("bad idx magic {got:#010x} (expected {expected:#010x})")]
    IdxMagic { got: u32, expected: u32 },

    #[error("idx file truncated: {0}")]
    IdxTruncated(String),

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid split fractions {0:?}: must be nonnegative and sum to 1")]
    BadFractions([f64; 3]),

    #[error("dataset has no labels")]
    MissingLabels,

    #[error("config error: {0}")]
    Config(String),

    #[error("config mismatch on resume: {0}")]
    ConfigMismatch(String),

    #[error("loss is not finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("perturbation budget violated at sample {index}: l-inf deviation {deviation}")]
    BudgetViolation { index: usize, deviation: f64 },

    #[error("budget audit failed at sample {index}: deviation {deviation} > {limit} (0-255 units)")]
    AuditFailure {
        index: usize,
        deviation: u32,
        limit: u32,
    },

    #[error("zero clean-logit norm at sample {0}")]
    ZeroLogitNorm(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 4 audit, 3 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::InvalidArgument(_) => 2,
            Error::AuditFailure { .. } => 4,
            _ => 3,
        }
    }
}
