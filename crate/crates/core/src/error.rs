use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("alignment error: BOLD volume {index} at {bold_time_s:.3} s needs EEG from {start_s:.3} s to {end_s:.3} s, outside the recording")]
    Alignment {
        index: usize,
        bold_time_s: f64,
        start_s: f64,
        end_s: f64,
    },
    #[error("empty result: {0}")]
    Empty(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config/geometry, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Alignment { .. } | Error::Empty(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }

    /// Prefix the message with where it happened, keeping the category.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Usage(m) => Error::Usage(format!("{ctx}: {m}")),
            Error::Empty(m) => Error::Empty(format!("{ctx}: {m}")),
            e @ (Error::Alignment { .. } | Error::Io { .. }) => Error::Data(format!("{ctx}: {e}")),
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! cfg_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use cfg_err;
pub(crate) use dim_err;
