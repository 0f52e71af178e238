use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the fingerprinting pipeline.
///
/// Variants are grouped so the CLI can map them onto distinct exit codes
/// (see [`Error::category`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("impairment produced non-finite samples: {0}")]
    Impairment(String),

    #[error("degenerate power delay profile: {0}")]
    DegeneratePdp(String),

    #[error("no packet detected (peak correlation {peak:.3} below threshold {threshold:.3})")]
    NoPacket { peak: f64, threshold: f64 },

    #[error("frame too short: need {needed} samples, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("device {0:?} is already enrolled")]
    Conflict(String),

    #[error("device {0:?} is not enrolled")]
    NotFound(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("calibration target unreachable: {0}")]
    Calibration(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Coarse failure classes, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Version,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Version => 4,
            ErrorCategory::Numerical => 5,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Parse { .. } => ErrorCategory::Config,
            Error::Version(_) => ErrorCategory::Version,
            Error::Impairment(_)
            | Error::Numerical(_)
            | Error::Training(_)
            | Error::Calibration(_) => ErrorCategory::Numerical,
            Error::Contract(_)
            | Error::DegeneratePdp(_)
            | Error::NoPacket { .. }
            | Error::Truncated { .. }
            | Error::Conflict(_)
            | Error::NotFound(_)
            | Error::Integrity(_)
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }
}
