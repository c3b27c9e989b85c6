use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// configuration problems, missing upstream artifacts, and provider
/// (transport/fixture) failures are distinguished so the caller can react.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unbound placeholder: {placeholder}")]
    Template { placeholder: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport {
        message: String,
        attempts: u32,
        retryable: bool,
    },

    #[error("fixture miss for prompt hash {hash}")]
    FixtureMiss { hash: String },

    #[error("parse error at offset {offset:?}: {message}")]
    Parse {
        message: String,
        offset: Option<usize>,
    },

    #[error("score out of range: {0}")]
    Range(String),

    #[error("unknown id: {id}")]
    Lookup { id: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// A question was skipped by an axiom constructor; the reason is logged
    /// by the pipeline and the run continues.
    #[error("skipped: {reason}")]
    Skipped { reason: String },

    #[error("missing upstream artifact {path} (produced by the `{producer}` stage)")]
    Upstream { path: String, producer: String },

    #[error("non-finite loss at training step {step}")]
    Train { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn skipped(reason: impl Into<String>) -> Self {
        Error::Skipped {
            reason: reason.into(),
        }
    }
}
