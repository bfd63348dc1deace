//! Versioned JSON documents written and read by the command-line tool.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Edge, GraphSequence, Partition};
use crate::error::{Error, Result};
use crate::graph::{NodeFit, Thresholds, TimeVaryingGraphEstimate};
use crate::metrics::{BenchmarkConfig, EvalReport};
use crate::selection::{BicReport, PenaltyGrid, Selection};
use crate::solver::SolverConfig;
use crate::synthetic::{Diagnostics, GroundTruthScenario, ScenarioKind, ScenarioSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn matrix_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::shape(format!("{n} rows of length {m}"), "ragged rows"));
    }
    Array2::from_shape_vec((n, m), rows.concat()).map_err(|e| Error::shape("rectangular matrix", e.to_string()))
}

fn edge_lists(sets: &[BTreeSet<Edge>]) -> Vec<Vec<[usize; 2]>> {
    sets.iter().map(|s| s.iter().map(|&(a, b)| [a, b]).collect()).collect()
}

fn edge_sets(lists: &[Vec<[usize; 2]>]) -> Result<Vec<BTreeSet<Edge>>> {
    lists
        .iter()
        .map(|l| {
            l.iter()
                .map(|&[a, b]| {
                    if a < b {
                        Ok((a, b))
                    } else {
                        Err(Error::InvalidConfig(format!("edge [{a}, {b}] must satisfy a < b")))
                    }
                })
                .collect()
        })
        .collect()
}

/// Ground truth of a simulated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: ScenarioSpec,
    pub n: usize,
    pub p: usize,
    pub partition: Partition,
    /// Per block, row-major `p x p`.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub precisions: Vec<Vec<Vec<f64>>>,
    /// Per block, pairs `[a, b]` with `a < b`.
    pub edges: Vec<Vec<[usize; 2]>>,
    pub diagnostics: Diagnostics,
}

impl TruthDocument {
    pub fn new(spec: &ScenarioSpec, truth: &GroundTruthScenario) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            command: "simulate".into(),
            seed: truth.seed,
            config: spec.clone(),
            n: truth.partition.n(),
            p: truth.p(),
            partition: truth.partition.clone(),
            covariances: truth.covariances.iter().map(matrix_rows).collect(),
            precisions: truth.precisions.iter().map(matrix_rows).collect(),
            edges: edge_lists(&truth.true_edges),
            diagnostics: truth.diagnostics.clone(),
        }
    }

    pub fn to_scenario(&self) -> Result<GroundTruthScenario> {
        let covariances = self.covariances.iter().map(|m| rows_matrix(m)).collect::<Result<Vec<_>>>()?;
        let precisions = self.precisions.iter().map(|m| rows_matrix(m)).collect::<Result<Vec<_>>>()?;
        let blocks = self.partition.num_blocks();
        if covariances.len() != blocks || precisions.len() != blocks || self.edges.len() != blocks {
            return Err(Error::shape(format!("{blocks} blocks"), "per-block lists of another length"));
        }
        Ok(GroundTruthScenario {
            kind: self.config.kind,
            partition: self.partition.clone(),
            covariances,
            precisions,
            true_edges: edge_sets(&self.edges)?,
            diagnostics: self.diagnostics.clone(),
            seed: self.seed,
        })
    }
}

/// One block of a node model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BlockDocument {
    /// 1-based first time index.
    pub start: usize,
    /// 1-based index one past the last time point.
    pub end: usize,
    /// Coefficients on the other variables in ascending label order.
    pub theta: Vec<f64>,
    pub neighbors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NodeDocument {
    pub node: usize,
    pub boundaries: Vec<usize>,
    pub blocks: Vec<BlockDocument>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub fuse_tol: f64,
    pub zero_tol: f64,
    /// Raw `(p - 1) x n` solver path, row `k` for the `k`-th other variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<Vec<f64>>>,
}

impl NodeDocument {
    /// Coefficient matrix for verification: the raw path when present,
    /// otherwise the piecewise-constant block path.
    pub fn coefficient_matrix(&self, p: usize, n: usize) -> Result<Array2<f64>> {
        let m = rows_matrix_or_blocks(self, n)?;
        if m.dim() != (p - 1, n) {
            return Err(Error::shape(
                format!("{}x{n}", p - 1),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(m)
    }
}

fn rows_matrix_or_blocks(node: &NodeDocument, n: usize) -> Result<Array2<f64>> {
    if let Some(rows) = &node.coefficients {
        return rows_matrix(rows);
    }
    let m = node.blocks.first().map_or(0, |b| b.theta.len());
    let mut out = Array2::zeros((m, n));
    for block in &node.blocks {
        if block.theta.len() != m || block.start < 1 || block.end > n + 1 || block.start >= block.end {
            return Err(Error::InvalidPartition(format!(
                "block [{}, {}) of node {} is inconsistent",
                block.start, block.end, node.node
            )));
        }
        for i in block.start - 1..block.end - 1 {
            for (k, v) in block.theta.iter().enumerate() {
                out[[k, i]] = *v;
            }
        }
    }
    Ok(out)
}

/// Settings that produced an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: String,
    pub standardize: bool,
    pub solver: SolverConfig,
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PenaltyGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EstimateDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: EstimateConfig,
    pub n: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Selection>,
    pub nodes: Vec<NodeDocument>,
    /// Per time index, pairs `[a, b]` with `a < b`.
    pub edges: Vec<Vec<[usize; 2]>>,
    pub warnings: Vec<String>,
}

impl EstimateDocument {
    pub fn new(
        config: EstimateConfig,
        estimate: &TimeVaryingGraphEstimate,
        selected: Option<Selection>,
        with_paths: bool,
    ) -> Self {
        let n = estimate.graph.n();
        let p = estimate.node_models.len();
        let mut warnings = Vec::new();
        let nodes = estimate
            .node_models
            .iter()
            .zip(&estimate.fits)
            .zip(&estimate.node_paths)
            .map(|((model, fit), path)| {
                if !fit.converged {
                    warnings.push(format!("node {}: solver stopped at the iteration limit", fit.node));
                }
                node_document(model, fit, with_paths.then(|| matrix_rows(&path.coeffs().to_owned())))
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            command: "estimate".into(),
            seed: None,
            config,
            n,
            p,
            selected,
            nodes,
            edges: edge_lists(&estimate.graph.edges),
            warnings,
        }
    }

    pub fn graph(&self) -> Result<GraphSequence> {
        Ok(GraphSequence::new(edge_sets(&self.edges)?))
    }
}

fn node_document(model: &crate::data::BlockModel, fit: &NodeFit, coefficients: Option<Vec<Vec<f64>>>) -> NodeDocument {
    let blocks = model
        .partition
        .boundaries()
        .windows(2)
        .zip(model.thetas.iter().zip(&model.neighborhoods))
        .map(|(w, (theta, neighbors))| BlockDocument {
            start: w[0],
            end: w[1],
            theta: theta.clone(),
            neighbors: neighbors.clone(),
        })
        .collect();
    NodeDocument {
        node: model.node,
        boundaries: model.partition.boundaries().to_vec(),
        blocks,
        iterations: fit.iterations,
        converged: fit.converged,
        objective: fit.objective,
        fuse_tol: fit.fuse_tol,
        zero_tol: fit.zero_tol,
        coefficients,
    }
}

/// BIC table and selection of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GridDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: EstimateConfig,
    pub report: BicReport,
}

impl GridDocument {
    pub fn new(config: EstimateConfig, report: BicReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            command: "grid".into(),
            seed: None,
            config,
            report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BenchmarkDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub report: EvalReport,
}

impl BenchmarkDocument {
    pub fn new(config: BenchmarkConfig, report: EvalReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.into(),
            command: "benchmark".into(),
            seed: config.seed_base,
            config,
            report,
        }
    }
}

/// Kind of scenario recorded in a document, for display.
pub fn kind_label(kind: ScenarioKind) -> &'static str {
    match kind {
        ScenarioKind::Chain => "chain",
        ScenarioKind::Nn => "nn",
    }
}
