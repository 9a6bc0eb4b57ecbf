use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    EmptyGroup,
    NonPositiveScale(f32),
    UnsupportedBitWidth(u32),
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    NonFinite {
        index: usize,
    },
    NonPositiveCalibration {
        index: usize,
    },
    InvalidAlpha(f64),
    InvalidOutlierRatio(f64),
    TooManyFourBit {
        n4: usize,
        channels: usize,
    },
    TooWide {
        channels: usize,
    },
    CodeOutOfRange {
        what: &'static str,
        value: u8,
        max: u8,
    },
    IneligibleOutlier {
        row: usize,
        col: usize,
    },
    HalfOverflow {
        what: &'static str,
        value: f32,
    },
    InvalidConfig(&'static str),
    InvalidLayer(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyGroup => f.write_str("empty quantization group"),
            Error::NonPositiveScale(s) => write!(f, "scale must be positive, got {s}"),
            Error::UnsupportedBitWidth(b) => write!(f, "unsupported bit width {b}"),
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected {expected}, found {found}"),
            Error::NonFinite { index } => write!(f, "non-finite value at index {index}"),
            Error::NonPositiveCalibration { index } => {
                write!(f, "calibration entry at index {index} is not positive")
            }
            Error::InvalidAlpha(a) => write!(f, "alpha must lie in [0, 1], got {a}"),
            Error::InvalidOutlierRatio(r) => write!(f, "outlier ratio must lie in [0, 1), got {r}"),
            Error::TooManyFourBit { n4, channels } => {
                write!(f, "{n4} four-bit channels requested but only {channels} exist")
            }
            Error::TooWide { channels } => {
                write!(f, "{channels} padded channels exceed the 16-bit column index range")
            }
            Error::CodeOutOfRange { what, value, max } => {
                write!(f, "{what} {value} out of range (max {max})")
            }
            Error::IneligibleOutlier { row, col } => {
                write!(f, "outlier at ({row}, {col}) is not in a 2-bit channel")
            }
            Error::HalfOverflow { what, value } => {
                write!(f, "{what} {value} does not fit a 16-bit float")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidLayer(msg) => write!(f, "inconsistent layer: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
