use std::path::Path;

use avtca_core::Error as CoreError;

/// Failure of a command, classified by its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("digest mismatch: {0}")]
    Digest(String),
    #[error("{0}")]
    GradCheck(String),
    #[error("{0}")]
    Divergence(String),
    #[error("output: {0}")]
    Output(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 0 ok, 1 config, 2 data, 3 digest, 4 gradcheck, 5 divergence,
    /// 6 writing outputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Digest(_) => 3,
            CliError::GradCheck(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Output(_) => 6,
        }
    }

    pub fn data_io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn output_io(path: &Path, e: std::io::Error) -> Self {
        CliError::Output(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::GradCheck { .. } => CliError::GradCheck(e.to_string()),
            CoreError::Divergence(_) => CliError::Divergence(e.to_string()),
            // shape faults at run time come from inputs that do not fit the model
            other => CliError::Data(other.to_string()),
        }
    }
}
