use std::io;

/// Errors of the experiment runner. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("training diverged in epoch {epoch} at optimizer step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: u64,
        #[source]
        source: qornn::Error,
    },
    #[error(transparent)]
    Core(#[from] qornn::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_MISSING_DATA: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingData(_) => EXIT_MISSING_DATA,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Core(qornn::Error::Diverged { .. }) => EXIT_DIVERGED,
            CliError::Core(qornn::Error::InvalidArgument(_) | qornn::Error::Unsupported(_)) => EXIT_CONFIG,
            CliError::Core(qornn::Error::Io(e)) | CliError::Io(e) if e.kind() == io::ErrorKind::NotFound => {
                EXIT_MISSING_DATA
            }
            _ => EXIT_FAILURE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
