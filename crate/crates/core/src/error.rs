use thiserror::Error;

/// Errors raised across the pipeline. Each variant carries a stable
/// machine-readable code (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: unknown class {name:?}")]
    UnknownClass { line: usize, name: String },

    #[error("line {line}: duplicate instance id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("line {line}: invalid instance {id:?}: {codes}")]
    InvalidInstance {
        line: usize,
        id: String,
        codes: String,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("{what} id {id} out of range (limit {limit})")]
    IdOutOfRange {
        what: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("attention mask row {row} allows no key")]
    EmptyMaskRow { row: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no predictions to score")]
    EmptyPredictions,

    #[error("class {0:?} is not assigned to any group")]
    UnmappedClass(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonfiniteLoss { epoch: usize, step: usize },

    #[error("{groups} parameter groups disagree with finite differences")]
    GradientMismatch { groups: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedLine { .. } => "MALFORMED_LINE",
            Error::UnknownClass { .. } => "UNKNOWN_CLASS",
            Error::DuplicateId { .. } => "DUPLICATE_ID",
            Error::InvalidInstance { .. } => "INVALID_INSTANCE",
            Error::InvalidSchema(_) => "INVALID_SCHEMA",
            Error::SequenceTooLong { .. } => "SEQUENCE_TOO_LONG",
            Error::IdOutOfRange { .. } => "ID_OUT_OF_RANGE",
            Error::EmptyMaskRow { .. } => "EMPTY_MASK_ROW",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::EmptyPredictions => "EMPTY_PREDICTIONS",
            Error::UnmappedClass(_) => "UNMAPPED_CLASS",
            Error::ConfigMismatch(_) => "CONFIG_MISMATCH",
            Error::Config(_) => "CONFIG_ERROR",
            Error::NonfiniteLoss { .. } => "NONFINITE_LOSS",
            Error::GradientMismatch { .. } => "GRADIENT_MISMATCH",
            Error::Checkpoint(_) => "CHECKPOINT_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }

    /// Process exit code: 1 data error, 2 config error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) => 2,
            Error::NonfiniteLoss { .. }
            | Error::EmptyMaskRow { .. }
            | Error::GradientMismatch { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
