use std::io;
use std::path::PathBuf;

use srlab_core::audit::AuditError;
use srlab_core::datagen::{DatagenError, DatasetError};
use srlab_core::decoding::DecodeError;
use srlab_core::expr::ExprError;
use srlab_core::policy::PolicyError;
use srlab_core::theory::{PacConfigError, ParseError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Pac(#[from] PacConfigError),
    #[error("formula: {0}")]
    Formula(#[from] ParseError),
    /// The run finished but some items failed; artifacts were written.
    #[error("{0}")]
    Incomplete(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Invalid(_) => "invalid-argument",
            Error::Datagen(_) => "datagen",
            Error::Dataset(_) => "dataset",
            Error::Expr(_) => "expr",
            Error::Policy(_) => "policy",
            Error::Decode(_) => "decode",
            Error::Audit(_) => "audit",
            Error::Pac(_) => "pac-config",
            Error::Formula(_) => "formula",
            Error::Incomplete(_) => "incomplete",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
