use thiserror::Error;

/// Errors produced by the numerical engine and the session protocol.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {requested} prototypes requested but only {available} free")]
    Capacity { requested: usize, available: usize },

    #[error("class {0} is already assigned to a prototype")]
    DuplicateClass(usize),

    #[error("class {0} has no assigned prototype")]
    UnassignedClass(usize),

    #[error("column {0} is not free")]
    ColumnTaken(usize),

    #[error("zero-norm embedding at row {0}")]
    ZeroVector(usize),

    #[error("batch size {0} is below the minimum of 2")]
    BatchSize(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("activation cache does not match the encoder parameters")]
    StaleCache,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("missing stage: {0}")]
    MissingStage(String),

    #[error("infeasible class separation: placed {placed} of {wanted} means after {attempts} attempts")]
    InfeasibleSeparation {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("dimension mismatch at line {line}: expected {expected} features, found {found}")]
    DimensionMismatch { line: u64, expected: usize, found: usize },

    #[error("unknown stage {stage} at line {line}")]
    UnknownStage { line: u64, stage: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
