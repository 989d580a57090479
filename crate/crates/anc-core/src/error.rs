use std::path::PathBuf;

/// Errors raised anywhere in the matching pipeline.
#[derive(Debug, thiserror::Error)]
pub enum AncError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("generation error: {0}")]
    Generation(String),
}

impl AncError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AncError::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with `ctx`, keeping the kind.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            AncError::InvalidArgument(m) => AncError::InvalidArgument(format!("{ctx}: {m}")),
            AncError::Format(m) => AncError::Format(format!("{ctx}: {m}")),
            AncError::Numeric(m) => AncError::Numeric(format!("{ctx}: {m}")),
            AncError::Generation(m) => AncError::Generation(format!("{ctx}: {m}")),
            io @ AncError::Io { .. } => io,
        }
    }

    /// Short machine-readable kind, used by the CLI's structured error line.
    pub fn kind(&self) -> &'static str {
        match self {
            AncError::InvalidArgument(_) => "invalid-argument",
            AncError::Format(_) => "format-error",
            AncError::Io { .. } => "io-error",
            AncError::Numeric(_) => "numeric-error",
            AncError::Generation(_) => "generation-error",
        }
    }
}

pub type Result<T, E = AncError> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::AncError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
