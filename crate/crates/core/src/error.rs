use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("nothing to generate: the mask selects no tokens")]
    EmptyHole,
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is busy with another edit")]
    Busy(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
