use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] bitrobust_core::Error),
}

impl CliError {
    /// Process exit status: 2 for bad invocations, 1 for failed runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::File { .. } | CliError::Core(_) => 1,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }
}
