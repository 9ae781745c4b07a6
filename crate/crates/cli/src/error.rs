use std::fmt;
use std::path::Path;

use trackcast_model::ModelError;

/// Failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { kind: Kind::Config, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { kind: Kind::Data, message: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::data(format!("{}: {e}", path.display()))
    }

    /// Re-labels any error as a configuration error, for validating inputs
    /// that come from configs or flags.
    pub fn as_config(self) -> Self {
        match self.kind {
            Kind::Numeric => self,
            _ => CliError { kind: Kind::Config, ..self },
        }
    }

    pub fn record(&self, command: &str) -> serde_json::Value {
        serde_json::json!({
            "command": command,
            "error": self.kind.label(),
            "exit_code": self.kind.exit_code(),
            "message": self.message,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.label(), self.message)
    }
}

impl From<trackcast_core::Error> for CliError {
    fn from(e: trackcast_core::Error) -> Self {
        let kind = match e {
            trackcast_core::Error::NonFinite(_) => Kind::Numeric,
            _ => Kind::Data,
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Core(c) => c.into(),
            ModelError::Config(_) => CliError { kind: Kind::Config, message: e.to_string() },
            ModelError::NonFinite(_) => CliError { kind: Kind::Numeric, message: e.to_string() },
            _ => CliError { kind: Kind::Data, message: e.to_string() },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
