use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("duplicate id {id:?} on rows {first_row} and {second_row}")]
    DuplicateId {
        id: String,
        first_row: usize,
        second_row: usize,
    },

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("truncated audio stream: {0}")]
    TruncatedAudio(String),

    #[error("zero-length audio stream")]
    EmptyStream,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no cough segments")]
    NoSegments,

    #[error("AUC undefined for single class")]
    SingleClass,

    #[error("training data must contain both classes")]
    SingleClassTraining,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::UnsupportedAudio(_) => "unsupported_audio",
            Error::TruncatedAudio(_) => "truncated_audio",
            Error::EmptyStream => "empty_stream",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::NoSegments => "no_segments",
            Error::SingleClass => "single_class",
            Error::SingleClassTraining => "single_class_training",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
