use crate::geometry::GeometryError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Narrows a crate result to a tensor result for use inside grad checks.
#[cfg(test)]
pub(crate) fn tensor_only<T>(r: Result<T>) -> crate::tensor::Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => panic!("unexpected error in differentiable closure: {other}"),
    })
}
