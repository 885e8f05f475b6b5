use std::fmt;

use dam_core::DamError;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Self { code: EXIT_MISSING, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: msg.into() }
    }

    pub fn other(msg: impl Into<String>) -> Self {
        Self { code: EXIT_OTHER, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DamError> for CliError {
    fn from(e: DamError) -> Self {
        let code = match e {
            DamError::InvalidArgument(_) | DamError::Shape(_) => EXIT_USAGE,
            DamError::NonFinite(_) | DamError::Numeric(_) => EXIT_NUMERIC,
            DamError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_OTHER,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::other(format!("json: {e}"))
    }
}
