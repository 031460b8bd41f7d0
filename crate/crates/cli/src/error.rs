//! Error surface of the harness, mapped onto process exit codes.

/// Exit code for configuration problems and other fatal errors.
pub const EXIT_CONFIG: i32 = 1;
/// Exit code for runs that finished but had failing cells.
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable, unparsable, or invalid configuration.
    #[error("config: {0}")]
    Config(String),
    /// A referenced artifact (checkpoint, advdata, fragment) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Core(#[from] patchpure_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub(crate) fn config(detail: impl Into<String>) -> Self {
        CliError::Config(detail.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
