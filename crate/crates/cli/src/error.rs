use pemma_core::Error as CoreError;

pub type CliResult<T> = Result<T, CliError>;

/// Failure of a stage, classified by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Invalid(_)
            | CoreError::ModalityUnavailable { .. }
            | CoreError::AlreadyInjected
            | CoreError::UnknownParam(_) => CliError::Config(msg),
            CoreError::Data(_) | CoreError::Nifti(_) | CoreError::Checkpoint(_) | CoreError::Io(_) => CliError::Data(msg),
            CoreError::NonFinite(_) => CliError::Numeric(msg),
            CoreError::Shape { .. } | CoreError::NonScalarLoss(_) | CoreError::ForeignVar => CliError::Internal(msg),
        }
    }
}

/// Output-side I/O failures (run directory, reports).
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}
