use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("histogram has a single populated bin; no threshold separates it")]
    DegenerateHistogram,
    #[error("tissue mask is empty: both H and S channels are degenerate")]
    EmptyMask,
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("sampling exhausted after {attempts} attempts drawing a {label} tile")]
    SamplingExhausted { attempts: usize, label: &'static str },
    #[error("invalid slide spec: {0}")]
    Spec(String),
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("split error: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
