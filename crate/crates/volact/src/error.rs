use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolactError {
    #[error("singular matrix in 3x3 solve")]
    SingularMatrix,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no foreground pixels above the opacity threshold")]
    EmptyForeground,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PartialEq for VolactError {
    fn eq(&self, other: &Self) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

pub type Result<T> = std::result::Result<T, VolactError>;
