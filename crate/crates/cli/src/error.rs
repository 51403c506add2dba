use std::path::PathBuf;

use thiserror::Error;

/// A configuration problem, located by line when it comes from a specific entry.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}{field}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn at(line: usize, field: &str, message: impl Into<String>) -> Self {
        Self { line: Some(line), field: field.to_string(), message: message.into() }
    }

    pub fn missing(field: &str) -> Self {
        Self { line: None, field: field.to_string(), message: "required but missing".into() }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("infeasible tolerance: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] eigdesign_core::Error),
    #[error("tuned setting violates its constraints: {0}")]
    Constraint(String),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Numerical(_) | CliError::Constraint(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
