use std::io;

/// Errors raised by the echo-control engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite sample in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("frame index gap: expected {expected}, got {actual}")]
    FrameGap { expected: usize, actual: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            what: what.into(),
            expected,
            actual,
        }
    }

    /// True for errors caused by configuration rather than input data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
