//! Crate-wide error type.
//!
//! Variants map onto the three failure classes the CLI distinguishes:
//! user/config mistakes, bad input data, and internal/numerical faults.

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or invalid request (exit 1).
    User,
    /// Input data that cannot be ingested or processed (exit 2).
    Data,
    /// Internal invariant violation or numerical failure (exit 3).
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty channel: {0}")]
    EmptyChannel(String),

    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("invalid glucose value: {0}")]
    InvalidGlucose(f64),

    #[error("insufficient class representation: {0}")]
    InsufficientClass(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unstable metric: undefined in {undefined} of {iterations} bootstrap iterations")]
    UnstableMetric { undefined: usize, iterations: usize },

    #[error("empty report")]
    EmptyReport,

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("stage order violation: cannot go from {from} to {to}")]
    StageOrder { from: String, to: String },

    #[error("subject {id}: {source}")]
    Subject { id: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach a subject id to an error bubbling out of a per-subject stage.
    pub fn for_subject(self, id: &str) -> Error {
        Error::Subject {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::User,
            Error::Parse(_)
            | Error::Schema(_)
            | Error::EmptyChannel(_)
            | Error::InsufficientData { .. }
            | Error::DegenerateSignal(_)
            | Error::InvalidGlucose(_)
            | Error::InsufficientClass(_)
            | Error::Io(_) => ErrorClass::Data,
            Error::Shape(_)
            | Error::Numerical(_)
            | Error::UnstableMetric { .. }
            | Error::EmptyReport
            | Error::InvalidSplit(_)
            | Error::StageOrder { .. } => ErrorClass::Internal,
            Error::Subject { source, .. } => source.class(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
