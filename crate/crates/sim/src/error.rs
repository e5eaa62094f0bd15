use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("generation error: {0}")]
    Generation(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
