use alloc::string::String;
use core::fmt;

/// Errors raised by the engine. Variants follow the failure classes the
/// public operations distinguish: bad shapes, invalid parameters, broken
/// call contracts, stale state and invalid configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    Dimension(String),
    Parameter(String),
    Contract(String),
    State(String),
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
