//! Error type shared by every public operation in the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of tensor kernels, routing, training, and persistence.
#[derive(Debug)]
pub enum Error {
    /// A tensor constructor received a zero dimension.
    InvalidDimensions { n: usize, c: usize, h: usize, w: usize },
    /// Data buffer length does not match the product of the dimensions.
    DataLength { expected: usize, got: usize },
    /// Channel count of an input does not match what the operation expects.
    ChannelMismatch { expected: usize, got: usize },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        expected: (usize, usize, usize, usize),
        got: (usize, usize, usize, usize),
    },
    /// Convolution kernels must be odd so same padding is exact.
    EvenKernel { size: usize },
    /// A value that must stay finite went NaN or infinite.
    NonFinite { context: &'static str },
    /// Configuration violates a structural invariant.
    InvalidConfig { reason: String },
    /// A class label lies outside the valid range.
    LabelOutOfRange { label: usize, classes: usize },
    /// Training loss became non-finite at the given epoch.
    Divergence { epoch: usize },
    /// Backward passes require training-mode routing.
    InferenceModeBackward,
    /// File does not start with the expected magic bytes.
    BadMagic { found: [u8; 4] },
    /// Serialized format version is not supported by this build.
    UnsupportedVersion { found: u32 },
    /// File ended before its declared content was complete.
    Truncated { context: &'static str },
    /// Checkpoint structure is self-inconsistent.
    MalformedCheckpoint { reason: String },
    /// Checkpoint contents do not match the expected configuration.
    ConfigMismatch { reason: String },
    /// Measured latency is too close to timer resolution to be meaningful.
    TimerResolution { median_us: f64 },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidDimensions { n, c, h, w } => {
                write!(f, "invalid tensor dimensions {}x{}x{}x{} (all must be nonzero)", n, c, h, w)
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {} does not match shape volume {}", got, expected)
            }
            Error::ChannelMismatch { expected, got } => {
                write!(f, "channel mismatch: expected {}, got {}", expected, got)
            }
            Error::ShapeMismatch { expected, got } => {
                write!(
                    f,
                    "shape mismatch: expected {:?}, got {:?}",
                    expected, got
                )
            }
            Error::EvenKernel { size } => {
                write!(f, "kernel size {} is even; same padding needs odd kernels", size)
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {}", context),
            Error::InvalidConfig { reason } => write!(f, "invalid configuration: {}", reason),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {} out of range for {} classes", label, classes)
            }
            Error::Divergence { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {}", epoch)
            }
            Error::InferenceModeBackward => {
                write!(f, "backward pass requested in inference mode; switch to training mode")
            }
            Error::BadMagic { found } => {
                write!(f, "bad magic bytes {:?}; not a recognized file", found)
            }
            Error::UnsupportedVersion { found } => {
                write!(f, "unsupported format version {}", found)
            }
            Error::Truncated { context } => write!(f, "file truncated while reading {}", context),
            Error::MalformedCheckpoint { reason } => write!(f, "malformed checkpoint: {}", reason),
            Error::ConfigMismatch { reason } => write!(f, "configuration mismatch: {}", reason),
            Error::TimerResolution { median_us } => {
                write!(
                    f,
                    "median latency {:.3} us is too close to timer resolution; use a larger spatial size",
                    median_us
                )
            }
            Error::Io(e) => write!(f, "i/o error: {}", e),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
