use thiserror::Error;

use crate::nn::NnError;

pub type Result<T, E = CaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CaError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("incompatible input: {0}")]
    Compat(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl CaError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CaError::Config(_) => 2,
            CaError::Io(_) => 3,
            CaError::Numeric(_) => 4,
            CaError::Compat(_) | CaError::Contract(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CaError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<NnError> for CaError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Shape(m) => CaError::Compat(m),
            NnError::Numeric(m) => CaError::Numeric(m),
            NnError::Contract(m) => CaError::Contract(m),
        }
    }
}

impl From<std::io::Error> for CaError {
    fn from(e: std::io::Error) -> Self {
        CaError::Io(e.to_string())
    }
}
