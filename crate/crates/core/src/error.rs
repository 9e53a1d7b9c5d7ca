use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("pretraining reached accuracy {accuracy:.4}, below the required {required:.2}")]
    Pretrain { accuracy: f64, required: f64 },
    #[error("update {update} ({phase}): {source}")]
    Run {
        update: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Adapter(_) => ErrorKind::Config,
            Error::Shape { .. } | Error::Data(_) => ErrorKind::Data,
            Error::Numeric(_) | Error::Pretrain { .. } => ErrorKind::Numeric,
            Error::Format { .. } | Error::Version { .. } | Error::Io { .. } => ErrorKind::Io,
            Error::Run { source, .. } => source.kind(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_update(self, update: usize, phase: &'static str) -> Self {
        Error::Run {
            update,
            phase,
            source: Box::new(self),
        }
    }
}
