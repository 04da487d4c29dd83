use thiserror::Error;

/// Errors raised by the simulator and its planning functions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    /// A configuration value is out of range. `field` is the dotted config path.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// A cost function was asked for something that has no meaning,
    /// such as a pipeline stage with zero layers.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot split {layers} layers into {parts} segments")]
    Partition { layers: u32, parts: u32 },

    /// An operation was invoked in a state that does not allow it.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),

    /// Every GPU on the server has crashed.
    #[error("unrecoverable server: {0}")]
    Unrecoverable(String),

    /// A trace query could not be answered.
    #[error("query error: {0}")]
    Query(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A run-time invariant check failed while processing event `event_index`.
    #[error("invariant violated at event {event_index}: {message}")]
    Invariant { event_index: u64, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl SimError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for SimError {
    fn from(err: std::io::Error) -> Self {
        SimError::Io(err.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
