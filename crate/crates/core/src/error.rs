use thiserror::Error;

use crate::grid::GridSpec;

pub type Result<T> = std::result::Result<T, QsmError>;

#[derive(Debug, Error)]
pub enum QsmError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("data length {got} does not match grid voxel count {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("spectrum is not Hermitian-symmetric (relative deviation {deviation:.3e})")]
    NonHermitianSpectrum { deviation: f64 },

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: GridSpec, right: GridSpec },

    #[error("orientation must be a unit vector, got norm {norm}")]
    InvalidOrientation { norm: f64 },

    #[error("COSMOS needs at least 3 orientations, got {got}")]
    InsufficientOrientations { got: usize },

    #[error("orientations {first} and {second} are not distinct")]
    DegenerateOrientations { first: usize, second: usize },

    #[error("backward called without a matching forward cache")]
    MissingForwardCache,

    #[error("training dataset is empty")]
    EmptyDataset,

    #[error("reference has zero norm inside the evaluation mask")]
    ZeroReference,

    #[error("evaluation mask selects no voxels")]
    EmptyMask,

    #[error("shape {index} does not fit inside the grid")]
    ShapeOutOfBounds { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
