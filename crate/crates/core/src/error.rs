use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variants carry enough context to
/// point an operator at the offending record or file position.
#[derive(Debug, Error)]
pub enum Error {
    #[error("record `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("record `{id}` has a non-finite value at index {index}")]
    NonFiniteValue { id: String, index: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed file {path}: {message} (line {line}, byte {byte})")]
    MalformedFile {
        path: PathBuf,
        line: u64,
        byte: u64,
        message: String,
    },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("value `{value}` does not occur for attribute `{attribute}`")]
    UnknownPositiveValue { attribute: String, value: String },

    #[error("concept `{0}`: no stratum has both positive and negative records")]
    NoEligibleGenre(String),

    #[error("subset too small: {0}")]
    SubsetTooSmall(String),

    #[error("training samples contain a single class")]
    SingleClassInput,

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("sample list is empty")]
    EmptySampleList,

    #[error("concept `{0}`: every replicate CAV failed the reliability gate")]
    AllReplicatesUnreliable(String),

    #[error("too few samples for a t-test: {0} (need at least 2)")]
    TooFewSamples(usize),

    #[error("zero variance in score distribution")]
    ZeroVariance,

    #[error("lambda {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("record `{id}` lacks attribute `{attribute}`")]
    MissingAttribute { id: String, attribute: String },

    #[error("zero vector")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(
        path: impl Into<PathBuf>,
        line: u64,
        byte: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::MalformedFile {
            path: path.into(),
            line,
            byte,
            message: message.into(),
        }
    }
}
