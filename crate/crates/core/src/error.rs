use std::path::PathBuf;

/// Errors produced anywhere in the training and scoring pipeline.
#[derive(Debug, thiserror::Error)]
pub enum TcnError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-numeric token {token:?} at sample {index}")]
    Parse { index: usize, token: String },
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("insufficient samples: need at least {needed}, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("invalid model file: {0}")]
    ModelFormat(String),
    #[error("unsupported model file version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<TcnError>,
    },
}

impl TcnError {
    /// The underlying error with any stage wrappers removed.
    pub fn root(&self) -> &TcnError {
        match self {
            TcnError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        TcnError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TcnError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TcnError::InvalidConfig(msg.into())
    }
}

pub type Result<T, E = TcnError> = std::result::Result<T, E>;
