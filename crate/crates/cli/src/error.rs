use std::path::Path;

use granary_core::ilp::IlpError;
use granary_core::sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Solver(String),
    #[error("workload mismatch: {a} vs {b}")]
    WorkloadMismatch { a: String, b: String },
}

impl CliError {
    /// 0 success, 1 runtime, 2 bad input, 3 solver.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Input(_) | CliError::WorkloadMismatch { .. } => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(_) | SimError::Model(_) | SimError::BadTrace(_) => CliError::Input(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<IlpError> for CliError {
    fn from(e: IlpError) -> Self {
        match e {
            IlpError::InvalidInstance(_) => CliError::Input(e.to_string()),
            IlpError::Infeasible => CliError::Solver("infeasible".into()),
            IlpError::TooLarge(_) => CliError::Solver(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
