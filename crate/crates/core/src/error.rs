use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("subject {subject} has no observed covariates")]
    EmptySubject { subject: usize },

    #[error("rank-deficient design for pattern {pattern:?}: dependent columns {columns:?}")]
    RankDeficient { pattern: Vec<usize>, columns: Vec<usize> },

    #[error("too few observations for pattern {pattern:?}: n_k = {n} < p_k = {p}")]
    TooFewObservations { pattern: Vec<usize>, n: usize, p: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("covariate {column} is required but unobserved")]
    Unobserved { column: usize },

    #[error("no usable candidate model: {0}")]
    NoCandidate(String),

    #[error("correlation screen: column {column} has no observed overlap with the response")]
    NoOverlap { column: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for malformed or inconsistent input, as opposed to numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Parse { .. }
                | Error::InvalidInput(_)
                | Error::EmptyDataset
                | Error::EmptySubject { .. }
                | Error::Json(_)
                | Error::Unobserved { .. }
                | Error::NoOverlap { .. }
        )
    }
}
