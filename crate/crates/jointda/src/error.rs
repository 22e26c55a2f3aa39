use std::path::PathBuf;

/// Errors surfaced by file IO, configs and the runner.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file not found: {0}")]
    MissingConfig(PathBuf),
    #[error("{path}: invalid config: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// A numerical check failed outright, e.g. a gradient audit.
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] jointda_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for divergence and non-finite values during a run.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::Numerical(_)
                | Self::Core(
                    jointda_core::Error::Diverged { .. } | jointda_core::Error::NonFinite { .. } | jointda_core::Error::NonFiniteGradient { .. }
                )
        )
    }

    /// Process exit status: 2 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let diverged = Error::Core(jointda_core::Error::Diverged {
            step: 3,
            detail: "nan".into(),
        });
        assert_eq!(diverged.exit_code(), 2);
        assert_eq!(Error::Numerical("audit".into()).exit_code(), 2);
        assert_eq!(Error::MissingConfig("a.json".into()).exit_code(), 1);
        assert_eq!(Error::Core(jointda_core::Error::Empty { what: "grid" }).exit_code(), 1);
        assert!(Error::MissingConfig("dir/a.json".into()).to_string().contains("dir/a.json"));
    }
}
