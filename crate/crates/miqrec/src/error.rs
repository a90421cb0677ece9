use std::io;
use std::path::PathBuf;

use miqrec_core::ErrorKind;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] miqrec_core::Error),
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: miqrec_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    /// A cache or checkpoint file that does not decode.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit status: 2 config, 3 data, 4 numeric, 5 verification.
    pub fn exit_code(&self) -> i32 {
        let kind = match self {
            CliError::Core(e) | CliError::InFile { source: e, .. } => e.kind(),
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Format { .. } => ErrorKind::Data,
            CliError::Config(_) => ErrorKind::Config,
            CliError::Verification(_) => ErrorKind::Verification,
        };
        match kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Verification => 5,
        }
    }
}
