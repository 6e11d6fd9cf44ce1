use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite gradient produced by `{op}` (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },

    #[error("sequence length {length} outside 1..={max}")]
    LengthOutOfRange { length: usize, max: usize },

    #[error("batch too small: {what} needs at least 2, got {got}")]
    BatchTooSmall { what: &'static str, got: usize },

    #[error("zero variance in correlation input")]
    ZeroVariance,

    #[error("zero denominator in concordance correlation")]
    ZeroDenominator,

    #[error("row count mismatch: {preds} predictions vs {targets} targets")]
    RowCountMismatch { preds: usize, targets: usize },

    #[error("video has no frames")]
    EmptyVideo,

    #[error("label value {value} out of range {range}")]
    LabelOutOfRange { value: f64, range: &'static str },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("model is frozen; unfreeze it before pretraining")]
    FrozenModel,

    #[error("frozen extractor parameters changed during a training step")]
    FrozenViolation,

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumFailure { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),

    #[error("parameter table mismatch at `{name}`: {detail}")]
    NameTableMismatch { name: String, detail: String },

    #[error("split `{0}` has no samples")]
    SplitEmpty(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
