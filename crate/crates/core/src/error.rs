use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("column {0} is already active")]
    DuplicateIndex(usize),
    #[error("column {0} is not active")]
    NotActive(usize),
    #[error("column {0} lies in the span of the active columns")]
    InSpan(usize),
    #[error("system is not determined: {0}")]
    NotDetermined(String),
    #[error("bad arity: {0}")]
    BadArity(String),
    #[error("dictionary columns are not unit norm")]
    NotNormalized,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("data format error at line {line}, column {column}: {message}")]
    DataFormat {
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
