use std::path::PathBuf;

/// Errors surfaced by the harness. Each maps to a process exit code via
/// [`HarnessError::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing artifact: {}", path.display())]
    MissingArtifact { path: PathBuf },
    #[error("corrupt file {} at byte {offset}: {message}", path.display())]
    Corrupt {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{}: file has schema version {found}, this build reads version {expected}", path.display())]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("no summary rows found under {}", .0.display())]
    EmptyResults(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Core(#[from] proxykd_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Csv { path, source }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl ToString) -> Self {
        HarnessError::Config {
            key: key.into(),
            message: message.to_string(),
        }
    }

    /// 2 for configuration problems, 3 for training divergence, 4 for a
    /// missing input artifact and 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use proxykd_core::Error as E;
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Core(E::InvalidConfig(_) | E::Unknown { .. }) => 2,
            HarnessError::Core(E::NonFiniteLoss { .. }) => 3,
            HarnessError::MissingArtifact { .. } => 4,
            _ => 1,
        }
    }
}
