use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] placerank_core::Error),
    #[error("{}: byte {offset}: {reason}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("ingest found {} problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    Ingest(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Attaches a path to a core format error.
pub(crate) fn at_path(path: &Path) -> impl FnOnce(placerank_core::Error) -> Error + '_ {
    move |e| match e {
        placerank_core::Error::Format { offset, reason } => Error::Format {
            path: path.to_path_buf(),
            offset,
            reason,
        },
        other => Error::Core(other),
    }
}
