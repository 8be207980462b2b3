use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}: not a valid file: {1}")]
    Format(PathBuf, String),

    #[error("{0}: unsupported: {1}")]
    Unsupported(PathBuf, String),

    #[error("{0}: {1}")]
    Manifest(PathBuf, String),

    #[error("external backend failed: {0}")]
    Backend(String),

    #[error(transparent)]
    Core(#[from] atlasfuse_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

impl From<Error> for atlasfuse_core::Error {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(c) => c,
            other => atlasfuse_core::Error::Backend(other.to_string()),
        }
    }
}
