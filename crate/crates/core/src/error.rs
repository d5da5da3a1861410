use crate::model::ModelError;
use crate::numkit::NumError;

/// Error type shared by the lab modules and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
