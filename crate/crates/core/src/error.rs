use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SonarError>;

#[derive(Debug, Error)]
pub enum SonarError {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid band {low_hz}..{high_hz} Hz for sample rate {sample_rate_hz} Hz")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        sample_rate_hz: u32,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SonarError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SonarError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad arguments, configs or missing inputs
    /// rather than failures while running a workflow.
    pub fn is_usage(&self) -> bool {
        match self {
            SonarError::InvalidConfig(_)
            | SonarError::InvalidData(_)
            | SonarError::InvalidBand { .. }
            | SonarError::InsufficientData(_)
            | SonarError::Checkpoint(_) => true,
            SonarError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            SonarError::Wav { source, .. } => matches!(
                source,
                hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::NotFound
            ),
            SonarError::Csv { source, .. } => matches!(
                source.kind(),
                csv::ErrorKind::Io(e) if e.kind() == std::io::ErrorKind::NotFound
            ),
            _ => false,
        }
    }
}
