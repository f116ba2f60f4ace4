use thiserror::Error;

pub type Result<T> = std::result::Result<T, IcdError>;

#[derive(Debug, Error)]
pub enum IcdError {
    #[error(
        "observation (context {context}, item {item}) has confidence {alpha} <= alpha0 {alpha0}; \
         rescaled confidence would not be positive"
    )]
    NonPositiveConfidence {
        context: usize,
        item: usize,
        alpha: f64,
        alpha0: f64,
    },

    #[error("duplicate observation for context '{context}' and item '{item}'")]
    DuplicatePair { context: String, item: String },

    #[error("index out of range: {what} {index} >= {bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("row {row}: duplicate feature index {index}")]
    DuplicateFeature { row: usize, index: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("oracle refused {cells} cells (cap is {cap})")]
    OracleCap { cells: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("relevant set is empty")]
    EmptyRelevant,

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("split: {0}")]
    Split(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("model file: {0}")]
    ModelFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
