use std::path::PathBuf;

use lotkit::ErrorCategory;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lotkit::Error),

    #[error("config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorReport<'a> {
    code: &'a str,
    message: String,
}

impl CliError {
    pub fn output(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Output {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::ConfigFile { .. } => "invalid_config_file",
            CliError::Config(_) => "invalid_config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Output { .. } => "output_error",
        }
    }

    /// 2 input, 3 configuration, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.category() {
                ErrorCategory::Input => 2,
                ErrorCategory::Config => 3,
                ErrorCategory::Numerical => 4,
            },
            CliError::ConfigFile { .. } | CliError::Config(_) | CliError::MissingInput(_) => 3,
            CliError::Output { .. } => 2,
        }
    }

    /// One-line JSON object `{"code": …, "message": …}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorReport {
            code: self.code(),
            message: self.to_string(),
        })
        .expect("error report serializes")
    }
}
