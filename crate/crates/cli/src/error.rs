use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Divergence(String),

    #[error("failing checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(attnprune::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<attnprune::Error> for CliError {
    fn from(e: attnprune::Error) -> Self {
        match e {
            attnprune::Error::Config { .. } => CliError::Config(e.to_string()),
            attnprune::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::ChecksFailed(_) => EXIT_CHECK,
            CliError::Usage(_) | CliError::Core(_) | CliError::Io(_) => EXIT_FAILURE,
        }
    }
}
