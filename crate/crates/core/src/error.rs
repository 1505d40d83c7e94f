use nfem_autodiff::AdError;
use nfem_fem::FemError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("fem: {0}")]
    Fem(#[from] FemError),
    #[error("autodiff: {0}")]
    Autodiff(#[from] AdError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid dataset file: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("too many non-converged load cases: {redraws} redraws for {count} samples")]
    RedrawLimit { redraws: usize, count: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl CoreError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
