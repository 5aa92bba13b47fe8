use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("parameter registry: {0}")]
    Registry(String),

    #[error("attention contract violated: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("assignment capacity exceeded: {gt} ground-truth items for {queries} queries")]
    Capacity { gt: usize, queries: usize },

    #[error("checkpoint incompatible with configuration: {0}")]
    Compatibility(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
