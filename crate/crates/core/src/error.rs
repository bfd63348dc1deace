use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    /// Row and column are 1-based positions in the data section of the file.
    #[error("cannot parse numeric value at row {row}, column {col}")]
    Parse { row: usize, col: usize },
    #[error("row {row} has {found} columns, expected {expected}")]
    NonRectangular {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("column {0} has zero variance")]
    ZeroVariance(usize),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("dataset too small: need n >= 2 and p >= 2, got n = {n}, p = {p}")]
    TooSmall { n: usize, p: usize },
    #[error("smoothing parameter must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("numerical overflow in solver for node {node} (Lipschitz estimate {lipschitz:e})")]
    NumericalOverflow { node: usize, lipschitz: f64 },
    #[error("degenerate fit for node {node}: residual sum of squares is {rss:e}")]
    DegenerateFit { node: usize, rss: f64 },
    #[error("block {block} has {size} observations, at least 2 required")]
    BlockTooSmall { block: usize, size: usize },
    #[error("could not draw a non-degenerate point configuration after {0} attempts")]
    DegenerateGeometry(usize),
    #[error("length mismatch: estimate has {estimate} time points, truth has {truth}")]
    LengthMismatch { estimate: usize, truth: usize },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    #[error("node {node}: {source}")]
    Node {
        node: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn at_node(self, node: usize) -> Self {
        match self {
            e @ Error::Node { .. } => e,
            e => Error::Node {
                node,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
