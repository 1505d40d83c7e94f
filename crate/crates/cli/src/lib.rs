//! Orchestration of dataset generation, training, evaluation, sweeps,
//! ablations and timing runs behind the `nfem` binary.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod vtk;

use std::path::{Path, PathBuf};

use nfem_core::CoreError;

pub use commands::{run, run_with_progress, Command, Outcome};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },
    #[error("{what} not found: {}", path.display())]
    NotFound { what: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn config(line: Option<usize>, msg: impl Into<String>) -> Self {
        Self::Config {
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category used in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::NotFound { .. } => "not-found",
            Self::Io { .. } => "io",
            Self::Csv(_) => "csv",
            Self::Core(CoreError::Fem(_)) => "fem",
            Self::Core(CoreError::Autodiff(_)) => "autodiff",
            Self::Core(CoreError::Diverged { .. }) => "diverged",
            Self::Core(CoreError::Checksum { .. }) => "checksum",
            Self::Core(_) => "core",
        }
    }
}

impl From<nfem_fem::FemError> for CliError {
    fn from(e: nfem_fem::FemError) -> Self {
        Self::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
