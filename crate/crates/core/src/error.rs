//! Error taxonomy shared by every module.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on caller-supplied data was violated.
    #[error("input error: {0}")]
    Input(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    /// A linear system was too close to singular to solve safely.
    #[error("singularity error: {0}")]
    Singularity(String),

    /// A computation produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A remote backend violated its wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A remote backend could not be reached after retries.
    #[error("backend error: {0}")]
    Backend(String),

    /// A persisted document carried the wrong format version.
    #[error("format error: {0}")]
    Format(String),

    /// Referential integrity of the store was violated.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A codebook insert could not be resolved by the split rule.
    #[error("unresolvable conflict: {0}")]
    UnresolvableConflict(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed; carries the stage name for the audit trail.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Innermost error, unwrapping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
