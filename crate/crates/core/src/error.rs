use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. `context` names the
    /// operation, `detail` names the offending dimension(s).
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    /// A layer or block was constructed with invalid parameters.
    #[error("config error: {0}")]
    Config(String),

    /// A config or record file failed to parse. Line numbers are 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The weight store has no entry (or a wrong-sized entry) for a node.
    #[error("missing or malformed weights for node {0}")]
    MissingWeights(usize),

    /// A usage error: an operation was invoked before its precondition held.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
