use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch { context: String, expected: usize, actual: usize },

    #[error("forward cache is stale or does not belong to this network: {0}")]
    StaleCache(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate embedding at index {index}: distance to center {distance:e} is below 1e-12")]
    DegenerateEmbedding { index: usize, distance: f64 },

    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),

    #[error("class {class} has {count} samples; at least {required} are needed")]
    ClassTooSmall { class: usize, count: usize, required: usize },

    #[error("need more points than neighbors: n = {n}, k = {k}")]
    TooFewPoints { n: usize, k: usize },

    #[error("outlier score {score} for task {task} is not positive")]
    NonPositiveScore { task: usize, score: f64 },

    #[error("idx: bad magic number 0x{found:08x} at byte 0 (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("idx: truncated file: expected {expected} bytes, got {actual} (payload starts at byte {offset})")]
    Truncated { expected: usize, actual: usize, offset: usize },

    #[error("idx: unexpected image dimensions {rows}x{cols} at byte 8 (expected 28x28)")]
    BadImageDims { rows: u32, cols: u32 },

    #[error("idx: corrupt label {label} at byte {offset}")]
    CorruptLabel { label: u8, offset: usize },

    #[error("missing data file {0}")]
    MissingData(PathBuf),

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("model container: {0}")]
    Format(String),

    #[error("model container version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("model container checksum mismatch")]
    Integrity,

    #[error("model kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("fingerprint mismatch: distance measure was not fitted on this feature extractor")]
    FingerprintMismatch,

    #[error("manual fusion requires a task id")]
    MissingTaskId,

    #[error("dynamic fusion requires an in-domain model for every task slot (slot {0} has none)")]
    MissingInDomain(usize),

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("accuracy matrix entry R[{row}][{col}] is missing")]
    MissingEntry { row: usize, col: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for this error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::StaleCache(_) => "stale_cache",
            Error::NonFinite(_) => "non_finite",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateEmbedding { .. } => "degenerate_embedding",
            Error::TooFewPairs(_) => "too_few_pairs",
            Error::ClassTooSmall { .. } => "class_too_small",
            Error::TooFewPoints { .. } => "too_few_points",
            Error::NonPositiveScore { .. } => "non_positive_score",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::BadImageDims { .. } => "bad_image_dims",
            Error::CorruptLabel { .. } => "corrupt_label",
            Error::MissingData(_) => "missing_data",
            Error::NotFound(_) => "not_found",
            Error::Format(_) => "format",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Integrity => "integrity",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::FingerprintMismatch => "fingerprint_mismatch",
            Error::MissingTaskId => "missing_task_id",
            Error::MissingInDomain(_) => "missing_in_domain",
            Error::UnknownMethod(_) => "unknown_method",
            Error::MissingEntry { .. } => "missing_entry",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
