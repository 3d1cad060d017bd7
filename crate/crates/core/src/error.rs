use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree do not.
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A NaN or infinity surfaced where only finite values are allowed.
    NumericFailure(String),
    InvalidArgument(String),
    /// The network does not end in GAP -> Dense -> Softmax.
    NotCamReady(String),
    UnknownPreset(String),
    EmptyData(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: expected shape {expected:?}, found {found:?}"),
            Error::NumericFailure(msg) => write!(f, "numeric failure: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NotCamReady(msg) => write!(f, "network is not CAM-ready: {msg}"),
            Error::UnknownPreset(name) => {
                write!(f, "unknown preset '{name}' (expected minivgg or miniresnet)")
            }
            Error::EmptyData(msg) => write!(f, "empty data: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
