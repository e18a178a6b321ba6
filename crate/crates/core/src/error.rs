use thiserror::Error;

/// Errors raised across the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("stream contains no valid rows ({skipped} skipped)")]
    EmptyStream { skipped: usize },
    #[error("timestamps must be strictly increasing (row {row})")]
    NonMonotonic { row: usize },
    #[error("gyro and reference time spans do not overlap")]
    NoOverlap,
    #[error("too few samples: need at least {needed}, have {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("feature name lists differ")]
    NameMismatch,
    #[error("feature `{0}` not present in dataset")]
    MissingFeature(String),
    #[error("lag {lag} too large for {rows} rows")]
    LagTooLarge { lag: usize, rows: usize },
    #[error("segment mean voltage is too close to zero")]
    DegenerateSegment,
    #[error("segment overlaps only {have} samples (need {needed})")]
    InsufficientOverlap { needed: usize, have: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite value in input at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEps(f64),
    #[error("target has zero variance")]
    ZeroVariance,
    #[error("averaging time {tau} s exceeds the largest allowed ({max} s)")]
    TauTooLarge { tau: f64, max: f64 },
    #[error("averaging time {0} s is not a positive multiple of the sample period")]
    InvalidTau(f64),
    #[error("no region with slope near -1/2 found in the Allan deviation curve")]
    NoSlopeRegion,
    #[error("reports were computed over different test sets")]
    InconsistentTestSets,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
