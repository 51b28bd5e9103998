use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Run(_) => 1,
        }
    }

    /// Wraps a failure while reading or generating data.
    pub fn dataset(e: san_core::Error) -> Self {
        CliError::Dataset(e.to_string())
    }
}

impl From<san_core::Error> for CliError {
    fn from(e: san_core::Error) -> Self {
        match e {
            san_core::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}
