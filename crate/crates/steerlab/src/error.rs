//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("missing artifact: {artifact} (run `{needed_command}` first)")]
    MissingArtifact {
        artifact: String,
        needed_command: String,
    },

    #[error("no steering headroom after pretraining:\n{report}")]
    NoHeadroom { report: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("task space exhausted: {0}")]
    Exhausted(String),

    #[error("empty accepted pair set: {0}")]
    EmptyAccepted(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/dependency, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
