use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time of flight out of recorded window: {0}")]
    TimeOfFlight(String),

    #[error("shape leaves the field of view: {0}")]
    ShapeOutOfGrid(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("training diverged at iteration {iteration}: total {total:.6e} exceeded {factor}x initial {initial:.6e} for {patience} iterations")]
    Diverged {
        iteration: usize,
        total: f64,
        initial: f64,
        factor: f64,
        patience: usize,
    },

    #[error("container kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("checksum mismatch: header {expected}, payload {actual}")]
    Checksum { expected: String, actual: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("unnormalized sequence: value {0} outside [0, 1]")]
    Unnormalized(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}
