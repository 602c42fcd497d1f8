use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// distinct exit codes (config / data / numerical).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint fingerprint mismatch: file has {file}, backbone has {backbone}")]
    FingerprintMismatch { file: String, backbone: String },

    #[error("format error in {path}: {detail} (byte offset {offset})")]
    Format {
        path: PathBuf,
        detail: String,
        offset: u64,
    },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 2,
            Error::Format { .. }
            | Error::Io { .. }
            | Error::MissingData(_)
            | Error::FingerprintMismatch { .. } => 3,
            Error::Numerical(_) | Error::Degenerate(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
