use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {context}: {shape:?} ({reason})")]
    InvalidShape {
        context: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid layer tap {requested}; valid taps are {valid:?}")]
    InvalidTap { requested: usize, valid: Vec<usize> },

    #[error("location {location} out of range for a {height}x{width} feature map")]
    LocationOutOfRange {
        location: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),
}
