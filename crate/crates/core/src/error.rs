use thiserror::Error;

use crate::latent::Shape;

pub type Result<T, E = DrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DrfError {
    /// A configuration value failed validation. `field` is the dotted path of the offending key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: Shape, got: Shape },

    #[error("non-finite value encountered: {context}")]
    Numeric { context: String },

    #[error("singular inversion: {context}")]
    Singularity { context: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("{context}: {source}")]
    Step {
        context: String,
        #[source]
        source: Box<DrfError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl DrfError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DrfError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        DrfError::Numeric {
            context: context.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DrfError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps the error with step/iteration context, keeping the original as source.
    pub fn at(self, context: impl Into<String>) -> Self {
        DrfError::Step {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any `Step` context wrappers.
    pub fn root(&self) -> &DrfError {
        match self {
            DrfError::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for configuration/validation failures (after unwrapping context).
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            DrfError::Config { .. } | DrfError::Precondition(_)
        )
    }
}
