use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A corpus document violates the DocRED schema or a structural invariant.
    #[error("document {doc:?}: {field}: {message}")]
    Schema {
        doc: String,
        field: String,
        message: String,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Evidence cannot form a usable pseudo document; the pair is scored
    /// from the original document only.
    #[error("pseudo document unavailable: {0}")]
    Fallback(String),

    #[error("training diverged at step {step} (documents {docs:?}): {message}")]
    Diverged {
        step: usize,
        docs: Vec<String>,
        message: String,
    },
}

impl Error {
    pub(crate) fn schema(doc: &str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            doc: doc.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::UnknownToken { .. } => "unknown-token",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Fallback(_) => "fallback",
            Error::Diverged { .. } => "diverged",
        }
    }
}
