use std::fmt;
use std::path::Path;

use gflow_core::Error as CoreError;

/// Failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Divergence,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Divergence => 4,
            Kind::Io => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(Kind::Io, format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::InvalidConfig(_)
            | CoreError::InvalidArchitecture(_)
            | CoreError::InvalidGrid(_)
            | CoreError::DelayNotAligned { .. }
            | CoreError::UnsupportedSolver(_)
            | CoreError::TooFewSeries(_) => Kind::Config,
            CoreError::DivergedTraining { .. }
            | CoreError::NonFiniteGradient
            | CoreError::NonFiniteState { .. }
            | CoreError::StepSizeUnderflow { .. } => Kind::Divergence,
            CoreError::Io(_) => Kind::Io,
            _ => Kind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
