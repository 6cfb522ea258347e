use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter or buffer `{0}`")]
    UnknownName(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::Shape {
        op,
        detail: detail.into(),
    })
}
