use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ddim_anomaly_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("payload length {found} bytes, expected {expected}")]
    PayloadLength { expected: usize, found: usize },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// Short stable category for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(_) => "numeric",
            Error::Io { .. } => "io",
            Error::CorruptHeader(_) | Error::UnsupportedVersion { .. } | Error::PayloadLength { .. } => "format",
            Error::CheckpointMismatch(_) => "checkpoint",
            Error::ManifestMismatch(_) => "manifest",
            Error::Config(_) => "config",
            Error::InFile { source, .. } => source.kind(),
            Error::Csv(_) => "csv",
        }
    }

    /// Error with any file context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }
}
