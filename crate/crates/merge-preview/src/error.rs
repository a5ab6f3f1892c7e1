use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] merge_preview_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },

    #[error("artifact not found: {0}")]
    MissingArtifact(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("{0}")]
    Failed(String),

    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_)
            | Self::Core(
                merge_preview_core::Error::InvalidSpacing(_) | merge_preview_core::Error::InvalidConfig(_),
            ) => 2,
            _ => 1,
        }
    }
}
