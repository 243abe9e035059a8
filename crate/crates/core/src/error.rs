use fedleak_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data: {0}")]
    Data(String),
    #[error("privacy accounting: {0}")]
    Privacy(String),
    #[error("attack: {0}")]
    Attack(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Path {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    /// Attach a path to an io error.
    pub fn at(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> CoreError {
        let path = path.as_ref().display().to_string();
        move |source| CoreError::Path { path, source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
