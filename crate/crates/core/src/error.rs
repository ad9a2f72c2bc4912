use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spectral point z = {0} must be strictly negative")]
    NonNegativeZ(f64),
    #[error("Stieltjes transform evaluated to {value} at c = {c}, z = {z}; expected a positive value")]
    NumericalBranchFailure { c: f64, z: f64, value: f64 },
    #[error("derivative denominator {0:e} is numerically zero")]
    SingularDerivativeDenominator(f64),
    #[error("invalid aspect ratio c = {0}; must be positive and finite")]
    InvalidAspectRatio(f64),
    #[error("invalid ridge penalty lambda = {0}; must be positive")]
    InvalidLambda(f64),
    #[error("predicted variance {0:e} is negative beyond rounding")]
    NegativeVariance(f64),
    #[error("ridgeless limit requires c < 1 (got c = {0}); variance diverges at the interpolation threshold")]
    InterpolationThreshold(f64),
    #[error("poison fraction theta = {0} outside [0, 1]")]
    ThetaOutOfRange(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("ridge penalty must be positive (got {0})")]
    NonPositiveLambda(f64),
    #[error("symmetric factorization failed: {0}")]
    SolveFailure(String),
    #[error("inner {0}x{0} Woodbury matrix is numerically singular")]
    InnerSingular(usize),
    #[error("dimension {dim} exceeds the dense-inversion cap of {cap}")]
    SizeCap { dim: usize, cap: usize },
    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX stream truncated: needed {needed} bytes, found {found}")]
    TruncatedFile { needed: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("no samples found for digit {0}")]
    NoSamplesForDigit(u8),
    #[error("patch of size {size} at ({row}, {col}) does not fit in a {rows}x{cols} image")]
    PatchOutOfBounds {
        row: usize,
        col: usize,
        size: usize,
        rows: usize,
        cols: usize,
    },
    #[error("requested subsample of {requested} exceeds the {available} available samples")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error("aggregate group {0} contains no usable records")]
    EmptyGroup(usize),
    #[error("input does not match the sweep schema: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
