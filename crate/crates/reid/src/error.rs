use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ReidError {
    #[error("layout mismatch: {root} is not a {layout} root (missing {missing:?})")]
    LayoutMismatch { root: PathBuf, layout: String, missing: Vec<String> },

    #[error("cannot parse identity/camera from {path}")]
    BadFilename { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config mismatch: checkpoint was written for config {stored}, given {given}")]
    ConfigMismatch { stored: String, given: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] plr_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReidError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ReidError {
    let path = path.into();
    move |source| ReidError::Io { path, source }
}
