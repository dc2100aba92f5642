use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Statistical failures of estimators (for
/// example a zero propensity at a matched unit) are not errors; they are
/// reported through [`crate::ope::ValueEstimate::failed`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-numeric cell in column `{column}` at data row {row}: `{value}`")]
    NonNumeric { column: String, row: usize, value: String },

    #[error("non-finite value in column `{column}` at data row {row}")]
    NonFinite { column: String, row: usize },

    #[error("treatment outside {{0,1}} in column `{column}` at data row {row}: `{value}`")]
    TreatmentOutOfRange { column: String, row: usize, value: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient arm sample: arm {arm} has {have} rows, need at least {need}")]
    InsufficientArmSample { arm: u8, have: usize, need: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("group {0} is empty")]
    EmptyGroup(usize),

    #[error("group {0} has no treated units")]
    EmptyTreatedGroup(usize),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("scenario `{0}` has no closed-form treatment effect")]
    NoClosedForm(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
