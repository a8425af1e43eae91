use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("zero-sized dimension ({width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("buffer length {actual} does not match {width}x{height}")]
    BufferLength {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("value {value} outside [0, 1]")]
    OutOfRange { value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image {width}x{height} is smaller than one {patch_size}px patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch_size: usize,
    },
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    FeatureDim { expected: usize, actual: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("class {0:?} has no images")]
    EmptyClass(String),
    #[error("at least two classes are required, found {0}")]
    TooFewClasses(usize),
    #[error("memory bank is not calibrated")]
    Uncalibrated,
    #[error("degenerate calibration: a_hi ({hi}) <= a_lo ({lo})")]
    DegenerateCalibration { lo: f64, hi: f64 },
    #[error("both classes must be present in the labels")]
    SingleClassLabels,
    #[error("no positive labels")]
    NoPositives,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
}
