//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or code shapes do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value is outside the operation's domain (e.g. non-positive box).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index (class id, label) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Matching was requested against an empty code list.
    #[error("match error: {0}")]
    Match(String),

    /// Invalid input data (empty set, duplicate id, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Synthetic generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Config or annotation text could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A serialized artifact has an unexpected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A pipeline stage prerequisite is missing on disk.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {component} is non-finite")]
    Divergence { step: usize, component: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for validation problems the user can
    /// fix in config or arguments, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Input(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
