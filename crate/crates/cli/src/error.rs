use cmm_core::CmmError;
use serde_json::json;
use std::fmt;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            kind: "runtime",
            message: message.into(),
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind, "code": self.code, "message": self.message}).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CmmError> for CliError {
    fn from(e: CmmError) -> Self {
        match e {
            CmmError::Invalid(_) | CmmError::Format(_) | CmmError::Checkpoint(_) | CmmError::Json(_) => {
                CliError::usage(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reclassifies failures while reading user-supplied inputs as usage errors.
pub fn as_input<T>(r: Result<T, CmmError>) -> CliResult<T> {
    r.map_err(|e| CliError::usage(e.to_string()))
}
