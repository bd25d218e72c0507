use forkfield::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// Process exit code: usage 2, validation 3, I/O 4.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => EXIT_USAGE,
            CliError::Core(Error::Io { .. } | Error::Format { .. }) => EXIT_IO,
            CliError::Validation(_) | CliError::Core(_) => EXIT_VALIDATION,
        }
    }
}
