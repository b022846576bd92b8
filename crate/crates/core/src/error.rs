use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("lemma `{lemma}` listed at both {first} and {second} (line {line})")]
    DuplicateLemma {
        lemma: String,
        first: String,
        second: String,
        line: usize,
    },

    #[error("degenerate response: no tokens to compare")]
    DegenerateResponse,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token `{0}` is not in the policy vocabulary")]
    UnknownToken(String),

    #[error("token id {0} is outside the policy vocabulary")]
    TokenOutOfRange(usize),

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("parameter divergence at step {step}: |w| = {magnitude:e}")]
    Divergence { step: usize, magnitude: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
