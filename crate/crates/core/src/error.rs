use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} outside {lo}..={hi}")]
    Range {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("scene generation: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed data: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite {component} loss at step {step} (source scenes {src_ids:?}, target scenes {tgt_ids:?})")]
    Numeric {
        step: u64,
        component: String,
        src_ids: Vec<u64>,
        tgt_ids: Vec<u64>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
