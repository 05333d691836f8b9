use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A pre-condition on shapes or values was not met.
    Contract(String),
    /// A factorization met a non positive pivot.
    Singular { pivot: usize, value: f64 },
    /// A root finder could not bracket or converge.
    Numerical(String),
    /// An iterate became NaN or infinite.
    Divergence { iteration: usize },
    /// Invalid configuration (step sizes, probabilities, missing context).
    Config(String),
    /// Calibration data was unusable.
    Calibration(String),
    /// A primitive without a derivative rule was recorded on a tape.
    UnsupportedOp(String),
    /// Broken internal invariant.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Singular { pivot, value } => {
                write!(f, "matrix is not positive definite (pivot {pivot} = {value:e})")
            }
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Divergence { iteration } => {
                write!(f, "iterate diverged (non-finite value) at iteration {iteration}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Calibration(msg) => write!(f, "calibration error: {msg}"),
            Error::UnsupportedOp(op) => write!(f, "primitive `{op}` cannot be differentiated"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::$variant(alloc::format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
