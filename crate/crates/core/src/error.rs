use std::io;

use thiserror::Error;

/// Errors raised anywhere in the beamforming pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("undersampled pulse: sampling frequency {fs} Hz is below 4 x center frequency {f0} Hz")]
    UndersampledPulse { fs: f64, f0: f64 },

    #[error("grid not tileable: {n_x} x {n_z} pixels is not a multiple of patch side {patch_side}")]
    GridNotTileable { n_x: usize, n_z: usize, patch_side: usize },

    #[error("duration too short: need {needed:.3e} s to contain the deepest echo, got {got:.3e} s")]
    DurationTooShort { needed: f64, got: f64 },

    #[error("empty overlap: every delayed sample falls outside the recorded trace")]
    EmptyOverlap,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular covariance at pixel ({iz}, {ix})")]
    SingularCovariance { iz: usize, ix: usize },

    #[error("empty ROI: {0}")]
    EmptyRoi(&'static str),

    #[error("zero background: outer region mean is zero")]
    ZeroBackground,

    #[error("no half crossing on the {0} side of the lateral profile")]
    NoHalfCrossing(&'static str),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad configuration values rather than numerics or I/O.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::UndersampledPulse { .. }
                | Error::GridNotTileable { .. }
                | Error::DurationTooShort { .. }
                | Error::EmptySplit(_)
                | Error::EmptyRoi(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_))
    }
}
