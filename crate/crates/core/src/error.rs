use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("timestamps are not strictly increasing at row {row}: {previous} then {current}")]
    Ordering {
        row: usize,
        previous: String,
        current: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training split has no observed values")]
    EmptyTrainingSplit,

    #[error("{split} split has no admissible windows: {reason}")]
    InsufficientHistory { split: String, reason: String },

    #[error("requested missing rate {requested} does not exceed the existing missing fraction {existing:.6}; choose a larger rate or data with fewer gaps")]
    RateBelowExisting { requested: f64, existing: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {length} is too short: need more than {required} steps")]
    SequenceTooShort { length: usize, required: usize },

    #[error("graph/sequence alignment: {graphs} graphs for {steps} steps")]
    Alignment { graphs: usize, steps: usize },

    #[error("row {row} of the predefined adjacency sums to zero")]
    ZeroRowSum { row: usize },

    #[error("non-finite values first produced in stage `{stage}`")]
    NonFinite { stage: String },

    #[error("memory attention needs at least one slot")]
    NoMemorySlots,

    #[error("statistics: {0}")]
    Stats(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
