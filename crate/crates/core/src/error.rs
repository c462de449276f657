use std::path::PathBuf;

/// Errors raised anywhere in the crate.
///
/// Each variant belongs to one of the categories reported by the command-line
/// tool (see [`Error::category`] and [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("empty mask for task {task}: total mass {mass:e} is below the pooling epsilon")]
    EmptyMask { task: String, mass: f64 },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::EmptyMask { .. } | Error::Generation(_) => "data",
            Error::Dimension(_) | Error::Contract(_) | Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric/invariant, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "numeric" => 4,
            _ => 5,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
