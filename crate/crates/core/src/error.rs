use thiserror::Error;

/// Errors produced by the simulator and its learning components.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated the operation's preconditions.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was invoked in the wrong state (e.g. backward before forward).
    #[error("invalid state: {0}")]
    State(String),

    /// A linear-algebra or optimization step could not be carried out.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configuration file or value failed validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    /// Serialized data was malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
