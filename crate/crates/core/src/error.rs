//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, training, and aggregation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: expected input dim {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid adapter rank {rank} for {rows}x{cols} layer")]
    InvalidRank { rank: usize, rows: usize, cols: usize },

    #[error("flat vector layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("hyperparameter {name}={value} outside valid range {range}")]
    HyperparameterRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("class weights sum to zero; cannot normalize")]
    DegenerateWeights,

    #[error("flip rule must be a derangement (class {fixed_point} maps to itself)")]
    NotADerangement { fixed_point: usize },

    #[error("k={k} out of range for {n} points (need 1 <= k <= n-1)")]
    KnnRange { k: usize, n: usize },

    #[error("ball tree requires at least one point")]
    EmptyPointSet,

    #[error("all clients excluded; aggregation aborted")]
    AllClientsExcluded,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error("partition retry bound exceeded after {retries} attempts; use a larger dataset or alpha")]
    PartitionRetriesExhausted { retries: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
