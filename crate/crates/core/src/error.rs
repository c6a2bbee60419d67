use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A layer received or would produce a tensor of the wrong shape.
    #[error("layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An input that makes the requested quantity undefined, e.g. a zero-norm embedding.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("cannot sample episode: {0}")]
    Sampling(String),

    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
