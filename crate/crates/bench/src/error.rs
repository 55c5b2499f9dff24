use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but does not hold what its format promises.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(posebench::Error),
    /// One or more self-test checks failed.
    #[error("{0} self-test check(s) failed")]
    Check(usize),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// 0 success, 2 config, 3 io, 4 divergence or solver failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Core(posebench::Error::Divergence { .. } | posebench::Error::SolverFailure(_)) => 4,
            CliError::Core(_) | CliError::Check(_) => 1,
        }
    }
}

impl From<posebench::Error> for CliError {
    fn from(e: posebench::Error) -> Self {
        match e {
            posebench::Error::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Core(e),
        }
    }
}
