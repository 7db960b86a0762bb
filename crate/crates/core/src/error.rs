use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("state error: {0}")]
    State(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("wavelength grid mismatch: {0}")]
    Grid(String),

    #[error("sweep validation failed: {0}")]
    Sweep(#[from] SweepError),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Distinct ways a monochromator sweep can fail validation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("missing wavelengths (nm): {0:?}")]
    MissingWavelengths(Vec<f64>),

    #[error("duplicate capture at {0} nm")]
    DuplicateWavelength(f64),

    #[error("unexpected capture at {0} nm (not on the expected grid)")]
    UnexpectedWavelength(f64),

    #[error("exposure drift at {wavelength} nm: {found} ms (sweep uses {expected} ms)")]
    ExposureDrift {
        wavelength: f64,
        expected: f64,
        found: f64,
    },

    #[error(
        "RGB gain at {wavelength} nm is {gain:?}; calibration requires gains fixed to 1:1:1 (white balance disabled)"
    )]
    Gain { wavelength: f64, gain: [f64; 3] },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
