//! Estimation of piecewise-constant time-varying Gaussian graphical models.
//!
//! Each variable is regressed on all others with coefficients that may change
//! over time. A group-fused penalty on successive coefficient vectors makes
//! the coefficient paths piecewise constant (recovering change points) and an
//! `l1` penalty makes every block sparse (recovering neighborhoods). The
//! per-node neighborhoods are then combined into one graph per time point.

pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod report;
pub mod selection;
pub mod solver;
pub mod synthetic;

pub use data::{
    block_coefficients, extract_partition, load_dataset, BlockModel, CoefficientPath, Edge,
    GraphSequence, Partition, TimeSeriesDataset,
};
pub use error::{Error, Result};
pub use graph::{combine_max, estimate_all_nodes, estimate_graph, Thresholds, TimeVaryingGraphEstimate};
pub use metrics::{boundary_distance, prf, run_benchmark, BenchmarkConfig, EvalReport};
pub use selection::{grid_search, oracle_estimate, BicReport, PenaltyGrid};
pub use solver::{solve, SolveResult, SolverConfig};
