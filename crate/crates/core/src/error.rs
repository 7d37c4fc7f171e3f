use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A geometric quantity outside the domain of a propagation formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid scenario, topology or simulation parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A run specification could not be parsed.
    #[error("{source_name}:{line}: key `{key}`: {message}")]
    Spec {
        source_name: String,
        line: usize,
        key: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
