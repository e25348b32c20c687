use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the numerics core, the model, training, retrieval and IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation received an empty input (zero tokens, empty index, ...).
    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    /// An input has no well-defined result, e.g. normalizing a zero vector.
    #[error("{0}: degenerate input")]
    DegenerateInput(&'static str),

    /// An operation produced NaN or infinity.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// A caller broke an API contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("manifest error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Manifest { line: Option<usize>, message: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Gradient contains NaN or infinity; training must stop.
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn manifest(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Manifest {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
