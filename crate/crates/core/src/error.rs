use thiserror::Error;

use crate::augmentation::AugmentError;
use crate::classical::CalibrationError;
use crate::dataset::DatasetError;
use crate::diagnostics::DiagnosticsError;
use crate::harness::HarnessError;
use crate::neural::NeuralError;
use crate::training::TrainingError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error. Each variant wraps the error type of one module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl Error {
    /// True when the failure comes from the numerics (non-finite objective,
    /// infeasible inverse problem, degenerate covariance) rather than from
    /// malformed input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Calibration(e) => e.is_numerical(),
            Error::Diagnostics(DiagnosticsError::DegenerateCovariance) => true,
            Error::Training(TrainingError::NonFiniteLoss { .. }) => true,
            Error::Harness(HarnessError::Cell { source, .. }) => source.is_numerical(),
            _ => false,
        }
    }
}
