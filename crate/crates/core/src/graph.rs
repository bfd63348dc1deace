//! Per-node estimation and combination of neighborhoods into one graph per
//! time point.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    block_coefficients, edge, extract_partition, BlockModel, CoefficientPath, GraphSequence,
    TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::solver::{solve, SolveResult, SolverConfig};

/// Thresholds for declaring change points and zero coefficients. `None`
/// selects the defaults of [`SolveResult::fuse_tol`] and [`SolveResult::zero_tol`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Thresholds {
    pub fuse_tol: Option<f64>,
    pub zero_tol: Option<f64>,
}

impl Thresholds {
    pub fn fixed(fuse_tol: f64, zero_tol: f64) -> Self {
        Self {
            fuse_tol: Some(fuse_tol),
            zero_tol: Some(zero_tol),
        }
    }

    /// `(fuse_tol, zero_tol)` for one solve.
    pub fn resolve(&self, result: &SolveResult) -> (f64, f64) {
        (
            self.fuse_tol.unwrap_or_else(|| result.fuse_tol()),
            self.zero_tol.unwrap_or_else(|| result.zero_tol()),
        )
    }
}

/// Solver statistics of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeFit {
    pub node: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub fuse_tol: f64,
    pub zero_tol: f64,
}

/// Time-varying graph assembled from per-node regressions.
#[derive(Debug, Clone)]
pub struct TimeVaryingGraphEstimate {
    /// Raw solver paths (or piecewise-constant paths for the oracle), indexed by node.
    pub node_paths: Vec<CoefficientPath>,
    pub node_models: Vec<BlockModel>,
    pub graph: GraphSequence,
    /// Solver settings, absent for the oracle.
    pub config: Option<SolverConfig>,
    pub fits: Vec<NodeFit>,
}

/// Solves every node in parallel; results are ordered by node.
pub fn estimate_all_nodes(data: &TimeSeriesDataset, cfg: &SolverConfig) -> Result<Vec<SolveResult>> {
    (0..data.p())
        .into_par_iter()
        .map(|a| solve(data, a, cfg).map_err(|e| e.at_node(a)))
        .collect()
}

/// Edge `(a, b)` is present at time `i` iff
/// `max(|beta^a_{b,i}|, |beta^b_{a,i}|) > zero_tol`.
pub fn combine_max(paths: &[CoefficientPath], zero_tol: f64) -> Result<GraphSequence> {
    combine(paths, zero_tol, f64::max)
}

/// Like [`combine_max`] with `min` in place of `max`.
pub fn combine_min(paths: &[CoefficientPath], zero_tol: f64) -> Result<GraphSequence> {
    combine(paths, zero_tol, f64::min)
}

fn combine(paths: &[CoefficientPath], zero_tol: f64, rule: fn(f64, f64) -> f64) -> Result<GraphSequence> {
    let p = paths.len();
    let n = paths.first().map_or(0, CoefficientPath::n);
    for (a, path) in paths.iter().enumerate() {
        if path.node() != a || path.p() != p || path.n() != n {
            return Err(Error::shape(
                format!("path {a} for node {a} with p = {p}, n = {n}"),
                format!("node {} with p = {}, n = {}", path.node(), path.p(), path.n()),
            ));
        }
    }
    let mut edges = vec![BTreeSet::new(); n];
    for a in 0..p {
        for b in a + 1..p {
            for (i, set) in edges.iter_mut().enumerate() {
                let w = rule(paths[a].coefficient(b, i).abs(), paths[b].coefficient(a, i).abs());
                if w > zero_tol {
                    set.insert(edge(a, b));
                }
            }
        }
    }
    Ok(GraphSequence::new(edges))
}

/// Turns one solve into block coefficients and solver statistics.
pub fn summarize_node(result: &SolveResult, thresholds: &Thresholds) -> Result<(BlockModel, NodeFit)> {
    let (fuse_tol, zero_tol) = thresholds.resolve(result);
    let partition = extract_partition(&result.path, fuse_tol);
    let model = block_coefficients(&result.path, &partition, zero_tol)?;
    let fit = NodeFit {
        node: result.path.node(),
        iterations: result.iterations,
        converged: result.converged,
        objective: result.final_objective,
        fuse_tol,
        zero_tol,
    };
    Ok((model, fit))
}

/// Graph from the block-constant paths of per-node models; edge sets are
/// therefore constant within every node's blocks.
pub fn graph_from_models(models: &[BlockModel]) -> Result<GraphSequence> {
    let paths = models.iter().map(BlockModel::path).collect::<Result<Vec<_>>>()?;
    combine_max(&paths, 0.0)
}

/// Full pipeline: solve each node, extract its partition and block
/// coefficients, then combine neighborhoods with the max rule.
pub fn estimate_graph(
    data: &TimeSeriesDataset,
    cfg: &SolverConfig,
    thresholds: &Thresholds,
) -> Result<TimeVaryingGraphEstimate> {
    let results = estimate_all_nodes(data, cfg)?;
    assemble(results, Some(cfg.clone()), thresholds)
}

pub(crate) fn assemble(
    results: Vec<SolveResult>,
    config: Option<SolverConfig>,
    thresholds: &Thresholds,
) -> Result<TimeVaryingGraphEstimate> {
    let mut node_models = Vec::with_capacity(results.len());
    let mut fits = Vec::with_capacity(results.len());
    for r in &results {
        let (model, fit) = summarize_node(r, thresholds).map_err(|e| e.at_node(r.path.node()))?;
        node_models.push(model);
        fits.push(fit);
    }
    let graph = graph_from_models(&node_models)?;
    Ok(TimeVaryingGraphEstimate {
        node_paths: results.into_iter().map(|r| r.path).collect(),
        node_models,
        graph,
        config,
        fits,
    })
}
