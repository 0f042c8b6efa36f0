use thiserror::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error(transparent)]
    Core(#[from] thct_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use thct_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verify(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument(_) => EXIT_USAGE,
                E::NonFinite(_) | E::NonDeterministic(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
