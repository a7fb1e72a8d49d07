use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    /// A configuration value is missing, unknown or out of range.
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    /// A caller broke a documented precondition (dimension mismatch, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite loss was encountered during local training.
    #[error("numeric divergence at epoch {epoch}{context}")]
    Divergence { epoch: usize, context: String },

    /// The server received an update it cannot place.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A round could not be completed.
    #[error("round error: {0}")]
    Round(String),

    /// A linear system could not be solved.
    #[error("numerical error: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Three anchors that do not span a plane.
    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch in {path}: expected `{expected}`, found `{found}`")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl SimError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches round/client context to a divergence error; other variants pass through.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            SimError::Divergence { epoch, context } => SimError::Divergence {
                epoch,
                context: format!("{context} ({ctx})"),
            },
            other => other,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Divergence { .. } | SimError::Numerical { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
