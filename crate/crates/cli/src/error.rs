use std::path::Path;
use std::process::ExitCode;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<npcd::Error> for CliError {
    fn from(e: npcd::Error) -> Self {
        use npcd::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Json { .. } | E::Format(_) => CliError::Io(msg),
            E::NonFinite { .. } | E::DegenerateData(_) | E::DegenerateGeometry(_) => CliError::Numeric(msg),
            E::Dimension { .. } | E::Argument(_) | E::Config(_) | E::State(_) | E::Capability(_) => CliError::Config(msg),
        }
    }
}
