use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("support condition violated at state {state}, action {action}")]
    SupportViolation { state: usize, action: usize },

    #[error("no conditional weight available for key {key}")]
    MissingWeight { key: String },

    #[error("enumeration would produce {count} trajectories, above the cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CisError {
    fn from(err: std::io::Error) -> Self {
        CisError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CisError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CisError {
    CisError::InvalidInput(msg.into())
}
