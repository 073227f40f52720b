use std::path::PathBuf;

use thiserror::Error;

/// Everything the std layer can fail with. [`XgpaError::exit_code`] maps
/// each kind onto the CLI's exit status.
#[derive(Debug, Error)]
pub enum XgpaError {
    #[error(transparent)]
    Model(#[from] xgpa_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = XgpaError> = std::result::Result<T, E>;

impl XgpaError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        XgpaError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XgpaError::Io {
            path: path.into(),
            source,
        }
    }

    /// 3 for numerical failure, 2 for everything caused by inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            XgpaError::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
