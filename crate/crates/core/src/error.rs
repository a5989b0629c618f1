use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported dimension {0} (at most 3 supported)")]
    UnsupportedDimension(usize),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("did not converge: {message}")]
    Convergence { message: String, last: Vec<f64> },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("goodness-of-fit test failed: {0}")]
    Test(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
