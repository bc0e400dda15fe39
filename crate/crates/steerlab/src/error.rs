use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum SteerError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("timestep {t} outside schedule range 1..={t_max}")]
    Timestep { t: usize, t_max: usize },

    #[error("inference index {k} outside grid range 1..={k_max}")]
    InferenceIndex { k: usize, k_max: usize },

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("safety bundle is empty")]
    EmptyBundle,

    #[error("bottleneck dimension mismatch: expected {expected}, got {got}")]
    Bottleneck { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called twice on the same tape; run a fresh forward pass first")]
    BackwardReuse,

    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = SteerError> = std::result::Result<T, E>;

impl SteerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SteerError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        SteerError::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
