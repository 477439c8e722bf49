use thiserror::Error;

/// Library-wide error type. Variants map onto the failure classes the
/// CLI translates into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension disagreement between arrays that must conform.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Non-finite values or a computation that cannot proceed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed text where structured content was expected. `line` is
    /// 1-based; line 0 means the location is not line-addressable.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Well-formed input whose content breaks a documented schema rule.
    #[error("schema violation: {0}")]
    Schema(String),

    /// A request whose exhaustive cost exceeds the documented cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An evaluation that cannot produce a defined result.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// A serialized artifact written by an unsupported schema version.
    #[error("unsupported pack schema version {found} (this build reads version {supported})")]
    Compat { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
