use thiserror::Error;

use crate::tensor::Shape3;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Shape3, actual: Shape3 },

    #[error("length mismatch: expected {expected} elements, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("channel mismatch: kernel expects {expected} input channels, input has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("kernel size {kh}x{kw} is not odd in both dimensions")]
    EvenKernel { kh: usize, kw: usize },

    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("{what} ({value}) is not divisible by {factor}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        factor: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("predictor variant is not reversible")]
    NotReversible,

    #[error("reconstruction diverged: max abs error {error:e} exceeds {threshold:e}")]
    ReconstructionDivergence { error: f64, threshold: f64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("bad magic {found:02x?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("unsupported dtype code {0}")]
    BadDtype(u8),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("trailing bytes: {0} unexpected bytes after payload")]
    TrailingBytes(usize),

    #[error("dimension overflow")]
    DimOverflow,

    #[error("dtype mismatch: file holds {found}, caller expects {expected}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("checkpoint manifest: {0}")]
    Manifest(String),

    #[error("checkpoint config hash mismatch: manifest {stored}, computed {computed}")]
    ConfigHashMismatch { stored: String, computed: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
