use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DmspError {
    #[error("insufficient neighbors: k = {k} but only {available} other points")]
    InsufficientNeighbors { k: usize, available: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("edge not in graph: {source_node} -> {target_node}")]
    EdgeNotInGraph { source_node: usize, target_node: usize },

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("ragged features in source {source_id} at row {row}: expected {expected}, found {found}")]
    RaggedFeatures {
        source_id: usize,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("invalid mask target: source {source_id}, index {index}")]
    InvalidMaskTarget { source_id: usize, index: usize },

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("not in simplex interior: {0}")]
    NotInSimplexInterior(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("no usable source")]
    NoUsableSource,

    #[error("sample skipped: source {source_id}, index {index}")]
    SampleSkipped { source_id: usize, index: usize },

    #[error("invalid evaluation set: {0}")]
    InvalidEvaluationSet(String),

    #[error("no evaluable samples")]
    NoEvaluableSamples,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DmspError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DmspError::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the CLI to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        use DmspError::*;
        match self {
            Config(_) => ErrorKind::Usage,
            InvalidLogits(_) | NotInSimplexInterior(_) | Numeric(_) | Dimension(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

pub type Result<T> = std::result::Result<T, DmspError>;
