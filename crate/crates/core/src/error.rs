use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },
    #[error("duplicate patient id {0:?}")]
    DuplicateId(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("task {0} has no positive examples")]
    NoPositives(String),
    #[error("task {task} needs {needed} eligible records, only {available} available")]
    NotEnoughRecords {
        task: String,
        needed: usize,
        available: usize,
    },
    #[error("metric needs both classes: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("unknown window {label:?}; valid windows: {}", valid.join(", "))]
    UnknownWindow { label: String, valid: Vec<String> },
    #[error(transparent)]
    CsvFormat(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
