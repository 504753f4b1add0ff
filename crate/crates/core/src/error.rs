use std::path::PathBuf;

use thiserror::Error;

use crate::spectral::ModeIndex;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {mode} lies outside the truncation radius {radius}")]
    OutOfTruncation { mode: ModeIndex, radius: usize },

    #[error("mode {0} appears more than once")]
    DuplicateMode(ModeIndex),

    #[error("the zero mode (0,0) is not part of the mean-zero state space")]
    ZeroMode,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("truncation mismatch: {left} vs {right}")]
    TruncationMismatch { left: usize, right: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wiener store covers [{have_min}, {have_max}] but [{need_min}, {need_max}] is required")]
    WindowNotCovered {
        have_min: i64,
        have_max: i64,
        need_min: i64,
        need_max: i64,
    },

    #[error("index arithmetic overflow while shifting by {0} steps")]
    IndexOverflow(i64),

    #[error("state blew up at step index {step}; last finite frame index {last_finite}")]
    BlowUp { step: i64, last_finite: i64 },

    #[error("ensemble size {0} exceeds the exact assignment limit of 256")]
    EnsembleTooLarge(usize),

    #[error("ensemble sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("deterministic periodic solve did not converge after {periods} periods (residual {residual:e})")]
    NoConvergence { periods: usize, residual: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed trajectory file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: file ends inside frame {frame} of {frames}")]
    Truncated { path: PathBuf, frame: usize, frames: usize },

    #[error("{path}: integrity check failed (stored hash {stored:016x}, payload hash {actual:016x})")]
    Integrity { path: PathBuf, stored: u64, actual: u64 },
}
