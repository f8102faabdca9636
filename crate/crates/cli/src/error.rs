use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Runtime(fedbook_core::Error),
}

impl From<fedbook_core::Error> for CliError {
    fn from(e: fedbook_core::Error) -> Self {
        match e {
            fedbook_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(fedbook_core::Error::Validation(msg.into()))
    }

    /// 1 for bad configuration, 2 for failed verification, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}
