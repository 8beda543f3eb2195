use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an argument (shape, range, divisibility) does not hold.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Input data is well-formed but semantically unusable (e.g. an empty mask).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("{} dataset file(s) missing:\n{}", .0.len(), format_paths(.0))]
    MissingFiles(Vec<PathBuf>),

    /// Numerical failure during optimisation; the message carries step, lr and batch ids.
    #[error("training diverged: {0}")]
    Training(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| format!("  {}", p.display()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Param(format!($($arg)*))
    };
}
pub(crate) use param_err;
