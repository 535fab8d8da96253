//! Error type shared by the numerical modules.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbitError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge: estimate {estimate:e}, error bound {error:e} ({context})")]
    Quadrature {
        estimate: f64,
        error: f64,
        context: String,
    },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} below floor {floor:e}")]
    NotPsd { min_eigenvalue: f64, floor: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl AmbitError {
    pub fn domain(msg: impl Into<String>) -> Self {
        AmbitError::Domain(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        AmbitError::Precondition(msg.into())
    }

    /// True for errors that come from the numerics rather than from input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            AmbitError::Quadrature { .. } | AmbitError::NotPsd { .. } | AmbitError::NonFinite(_)
        )
    }
}

impl From<std::io::Error> for AmbitError {
    fn from(e: std::io::Error) -> Self {
        AmbitError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AmbitError>;
