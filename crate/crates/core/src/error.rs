use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VaceError>;

#[derive(Debug, Error)]
pub enum VaceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("series of length {len} is shorter than patch length {patch_len}")]
    InsufficientLength { len: usize, patch_len: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("trajectory of {len} embeddings is too short for offset {delta}")]
    InsufficientTrajectory { len: usize, delta: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite loss at step {step}")]
    NumericFailure { step: usize },

    #[error("spectrum has zero total mass")]
    UndefinedSpectrum,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("no input: {0}")]
    NoInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("series {series}, stage {stage}: {source}")]
    Stage {
        series: String,
        stage: &'static str,
        #[source]
        source: Box<VaceError>,
    },
}

impl VaceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VaceError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, series: &str, stage: &'static str) -> Self {
        VaceError::Stage {
            series: series.to_string(),
            stage,
            source: Box::new(self),
        }
    }
}
