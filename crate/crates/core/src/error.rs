use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (search spaces, costs, parameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// The graph does not have the shape an operation requires.
    #[error("structural error: {0}")]
    Structural(String),

    /// A caller-supplied component (policy, prune function) broke its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("speedup is undefined: merged cost is zero")]
    UndefinedRatio,

    #[error("step {index} out of range for plan of length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("grid of {size} configurations exceeds cap of {cap}")]
    GridOverflow { size: String, cap: u128 },

    #[error("profile record `{record}`: {reason}")]
    Load { record: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn load(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            record: record.into(),
            reason: reason.into(),
        }
    }
}
