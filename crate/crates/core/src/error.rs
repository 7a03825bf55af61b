use std::path::PathBuf;

use thiserror::Error;

use crate::nn::Mlp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("mesh resolution error: {0}")]
    Resolution(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:.3e}, tolerance {tolerance:.1e})")]
    Solver {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("{} heart nodes unreachable from the activation sources (first: {:?})", .nodes.len(), .nodes.iter().take(8).collect::<Vec<_>>())]
    Unreachable { nodes: Vec<usize> },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Training {
        epoch: usize,
        /// Weights from the last epoch whose loss was finite.
        last_finite: Option<Box<Mlp>>,
    },

    #[error("missing artifact from stage `{stage}`: {}", .path.display())]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed file {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) | Error::Input(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Solver { .. } | Error::Training { .. } | Error::Unreachable { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
