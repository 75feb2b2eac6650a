use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid id {id} (valid range 0..{limit})")]
    InvalidId { id: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema violation in case `{case_id}`: {detail}")]
    Schema { case_id: String, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("taxonomy hash mismatch: file has {found}, expected {expected}")]
    TaxonomyMismatch { expected: String, found: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("undiagnosable case: all rater differentials are empty")]
    Undiagnosable,

    #[error("unsupported target: category {category} has target mass but no source cases")]
    UnsupportedTarget { category: usize },

    #[error("unsupported fit: {0}")]
    UnsupportedFit(String),

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code class: 1 configuration, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidId { .. } | Error::UnsupportedFit(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
