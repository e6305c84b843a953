//! Error type of the command-line layer, mapped onto process exit codes.

use std::fmt;

/// Exit codes: 2 usage, 3 parse/validation, 4 numeric failure, 5 I/O.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Parse(String),
    Numeric(String),
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Parse(_) => 3,
            AppError::Numeric(_) => 4,
            AppError::Io(_) => 5,
        }
    }

    /// Single-line machine-parseable form, `E<code>: <message>`.
    pub fn render(&self) -> String {
        let msg = match self {
            AppError::Usage(m) | AppError::Parse(m) | AppError::Numeric(m) | AppError::Io(m) => m,
        };
        format!("E{}: {}", self.exit_code(), msg)
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::error::Error for AppError {}

impl From<advcali_core::Error> for AppError {
    fn from(e: advcali_core::Error) -> Self {
        use advcali_core::Error as E;
        match e {
            E::Numeric(m) => AppError::Numeric(m),
            E::State(m) => AppError::Numeric(m),
            E::Shape(m) | E::Argument(m) | E::Domain(m) | E::Validation(m) => AppError::Parse(m),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
