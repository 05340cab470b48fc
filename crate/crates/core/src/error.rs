use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("degenerate field: values have zero variance")]
    DegenerateField,

    #[error("coincident centroids at locations {0} and {1}")]
    CoincidentCentroids(usize, usize),

    #[error("degenerate model: every SHAP value is zero")]
    DegenerateModel,

    #[error("node {node} of tree {tree} has zero training cover")]
    ZeroCover { tree: usize, node: usize },

    #[error("stage `{stage}` failed after {processed}: {source}")]
    Stage {
        stage: &'static str,
        processed: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
