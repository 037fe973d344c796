use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Why a weight container could not be read.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error("manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },
    #[error("unsupported container format_version {0} (expected 1)")]
    UnsupportedVersion(u64),
    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}` appears twice in the manifest")]
    DuplicateTensor { name: String },
    #[error("tensor `{name}`: missing blob {path}")]
    MissingBlob { name: String, path: PathBuf },
    #[error("tensor `{name}`: blob {path} has {available} bytes from offset {offset}, need {needed}")]
    TruncatedBlob {
        name: String,
        path: PathBuf,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("tensor `{name}`: non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] cxrnet_core::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    /// Process exit code: 1 usage, 2 data or validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Core(cxrnet_core::Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
