use homa_core::HomaError;

/// Failure of one invocation, mapped to the process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input files.
    #[error("{0}")]
    Usage(String),
    /// A check suite ran and found violations.
    #[error("{0}")]
    Suite(String),
    #[error(transparent)]
    Runtime(#[from] HomaError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Suite(_) | CliError::Runtime(_) => 1,
        }
    }

    /// Reclassifies a core error about user input as a usage error.
    pub fn input(e: HomaError) -> Self {
        CliError::Usage(e.to_string())
    }
}
