use thiserror::Error;

/// Errors surfaced by the simulator and estimator building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid array configuration: {0}")]
    InvalidConfig(String),
    #[error("element index ({0}, {1}) outside the symmetric index set")]
    IndexOutOfRange(i64, i64),
    #[error("geometry out of the supported region: {0}")]
    BadGeometry(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty snapshot batch")]
    EmptyBatch,
    #[error("distance grid has no valid points ({0})")]
    EmptyGrid(String),
    #[error("path power evidence undefined: every line was excluded")]
    EvidenceUndefined,
    #[error("azimuth too close to the array axis (|sin theta| <= {0:.1e})")]
    DegenerateAzimuth(f64),
    #[error("{0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
