use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical overflow in primitive `{primitive}`")]
    NumericalOverflow { primitive: &'static str },

    #[error("OOD gradient: non-finite input gradient at path point {point}")]
    OodGradient { point: usize },

    #[error("degenerate statistic: zero standard deviation for pair ({u}, {v})")]
    DegenerateStatistic { u: usize, v: usize },

    #[error("directed cycle {cycle:?}")]
    Cycle { cycle: Vec<usize> },

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

/// Returns a contract-violation error when `cond` is false.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
