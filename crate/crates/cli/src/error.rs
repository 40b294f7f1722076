use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("check failed: {0}")]
    Check(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
            CliError::Check(_) => 1,
        }
    }

    /// Prefix the message with where it happened (a step, a run, a file).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{ctx}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{ctx}: {m}")),
            CliError::Check(m) => CliError::Check(format!("{ctx}: {m}")),
        }
    }
}

impl From<cdecay::Error> for CliError {
    fn from(e: cdecay::Error) -> Self {
        use cdecay::Error as E;
        let msg = e.to_string();
        match e {
            E::Invalid(_) => CliError::Config(msg),
            E::Io(_)
            | E::Json(_)
            | E::Manifest(_)
            | E::IdxMagic { .. }
            | E::IdxTruncated { .. }
            | E::IdxCountMismatch { .. } => CliError::Io(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
