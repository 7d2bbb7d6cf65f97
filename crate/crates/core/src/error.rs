use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },

    #[error("{path}: unsupported element type `{found}` (supported: MET_FLOAT, MET_UCHAR, MET_USHORT)")]
    UnsupportedElementType { path: PathBuf, found: String },

    #[error("{path}: payload is {actual} bytes, DimSize implies {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-submodular pairwise term on edge {edge}: V01+V10-V00-V11 = {deficit}")]
    NonSubmodular { edge: usize, deficit: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
