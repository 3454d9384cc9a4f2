use qsm_core::QsmError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FILE: i32 = 3;
pub const EXIT_GRID: i32 = 4;
pub const EXIT_STATE: i32 = 5;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn file(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FILE,
            message: message.into(),
        }
    }

    pub fn state(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_STATE,
            message: message.into(),
        }
    }

    /// Prefixes the message with what was being done.
    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

pub fn exit_code(e: &QsmError) -> i32 {
    match e {
        QsmError::Io(_) | QsmError::Format(_) | QsmError::NonFinite { .. } => EXIT_FILE,
        QsmError::GridMismatch { .. } | QsmError::InvalidGrid(_) | QsmError::LengthMismatch { .. } => EXIT_GRID,
        QsmError::InvalidParameter(_)
        | QsmError::InvalidOrientation { .. }
        | QsmError::InsufficientOrientations { .. }
        | QsmError::DegenerateOrientations { .. }
        | QsmError::ShapeOutOfBounds { .. }
        | QsmError::EmptyDataset => EXIT_CONFIG,
        QsmError::NonHermitianSpectrum { .. }
        | QsmError::MissingForwardCache
        | QsmError::ZeroReference
        | QsmError::EmptyMask => EXIT_STATE,
    }
}

impl From<QsmError> for CliError {
    fn from(e: QsmError) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
