use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("capacity exceeded for label {label}: requested {requested}, available {available}")]
    Capacity {
        label: usize,
        requested: usize,
        available: usize,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("device {index}: {source}")]
    Device {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("encounter {index}: {source}")]
    Encounter {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension { expected, got })
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
