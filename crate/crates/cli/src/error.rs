use std::io;
use std::path::PathBuf;

/// Failures surfaced by the command line, each mapped onto an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] chnr::Error),
    #[error("config error: {0}")]
    Spec(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{} already holds results from a different spec; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 for configuration problems, 3 for data and I/O problems, 4 for
    /// numerical breakdown.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e {
                chnr::Error::Config(_) | chnr::Error::Usage(_) => 2,
                chnr::Error::Numeric(_) => 4,
                chnr::Error::Data(_)
                | chnr::Error::Format { .. }
                | chnr::Error::Csv(_)
                | chnr::Error::Io(_) => 3,
            },
            CliError::Spec(_) | CliError::Exists(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
