//! BIC scoring, two-dimensional penalty grid search and the oracle baseline
//! that knows the true change points.

use std::fmt::Write as _;

use log::warn;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    block_coefficients, extract_partition, piecewise_path, GraphSequence, Partition,
    TimeSeriesDataset, DEFAULT_ZERO_TOL,
};
use crate::error::{Error, Result};
use crate::graph::{assemble, graph_from_models, summarize_node, NodeFit, Thresholds, TimeVaryingGraphEstimate};
use crate::solver::{loss_value, solve_problem, NodeProblem, SolveResult, SolverConfig, StaticLasso};

/// `lambda1 = 100 * 0.98^(50 + i)`.
pub fn geometric_lambda1(i: u32) -> f64 {
    geometric(100.0, 50 + i)
}

/// `lambda2 = 285 * 0.98^(230 + j)`.
pub fn geometric_lambda2(j: u32) -> f64 {
    geometric(285.0, 230 + j)
}

// repeated products are exactly reproducible, `powi` is not
fn geometric(scale: f64, power: u32) -> f64 {
    (0..power).fold(scale, |v, _| v * 0.98)
}

/// Index ranges of the full-resolution geometric grid.
pub const FULL_LAMBDA1_INDICES: std::ops::RangeInclusive<u32> = 0..=90;
pub const FULL_LAMBDA2_INDICES: std::ops::RangeInclusive<u32> = 60..=195;

/// Descending values of both penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PenaltyGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl PenaltyGrid {
    pub fn new(lambda1: Vec<f64>, lambda2: Vec<f64>) -> Result<Self> {
        let grid = Self { lambda1, lambda2 };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("lambda1", &self.lambda1), ("lambda2", &self.lambda2)] {
            if values.is_empty() {
                return Err(Error::InvalidConfig(format!("{name} grid is empty")));
            }
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidConfig(format!("{name} grid values must be positive and finite")));
            }
            if values.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidConfig(format!("{name} grid must be strictly descending")));
            }
        }
        Ok(())
    }

    /// Geometric grid at the given (ascending) indices of [`geometric_lambda1`] and [`geometric_lambda2`].
    pub fn geometric(i: &[u32], j: &[u32]) -> Result<Self> {
        Self::new(
            i.iter().map(|&k| geometric_lambda1(k)).collect(),
            j.iter().map(|&k| geometric_lambda2(k)).collect(),
        )
    }

    /// Every tenth `lambda1` index and every fifteenth `lambda2` index of the full grid.
    pub fn default10() -> Self {
        let i: Vec<u32> = FULL_LAMBDA1_INDICES.step_by(10).collect();
        let j: Vec<u32> = FULL_LAMBDA2_INDICES.step_by(15).collect();
        Self::geometric(&i, &j).expect("static grid is valid")
    }

    pub fn full() -> Self {
        let i: Vec<u32> = FULL_LAMBDA1_INDICES.collect();
        let j: Vec<u32> = FULL_LAMBDA2_INDICES.collect();
        Self::geometric(&i, &j).expect("static grid is valid")
    }

    /// `default10` or `full`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default10" => Ok(Self::default10()),
            "full" => Ok(Self::full()),
            other => Err(Error::InvalidConfig(format!(
                "unknown grid preset '{other}' (expected default10 or full)"
            ))),
        }
    }

    pub fn single(lambda1: f64, lambda2: f64) -> Result<Self> {
        Self::new(vec![lambda1], vec![lambda2])
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.lambda1.len() * self.lambda2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `log(loss / n) + (log n / n) * support`.
pub fn bic_value(loss: f64, n: usize, support: usize, node: usize) -> Result<f64> {
    if !(loss > f64::MIN_POSITIVE) {
        return Err(Error::DegenerateFit { node, rss: loss });
    }
    let nf = n as f64;
    Ok((loss / nf).ln() + nf.ln() / nf * support as f64)
}

/// BIC of one node: `log(L(beta) / n) + (log n / n) sum_j |S(theta_j)|`, with
/// blocks and supports from [`extract_partition`] and [`block_coefficients`].
pub fn bic_score(
    data: &TimeSeriesDataset,
    node: usize,
    result: &SolveResult,
    fuse_tol: f64,
    zero_tol: f64,
) -> Result<f64> {
    let loss = loss_value(data, node, result.path.coeffs())?;
    let partition = extract_partition(&result.path, fuse_tol);
    let model = block_coefficients(&result.path, &partition, zero_tol)?;
    let support = model.neighborhoods.iter().map(Vec::len).sum();
    bic_value(loss, data.n(), support, node)
}

/// Grid-search behavior beyond the solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridOptions {
    pub thresholds: Thresholds,
    /// Start each solve from the previous `lambda2` solution of the same
    /// node and `lambda1`.
    pub warm_start: bool,
    /// Keep the graph of every cell.
    pub keep_graphs: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            warm_start: true,
            keep_graphs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CellFailure {
    pub lambda1_index: usize,
    pub lambda2_index: usize,
    pub node: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Selection {
    pub lambda1_index: usize,
    pub lambda2_index: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total_bic: f64,
}

/// BIC values over the grid; `None` marks cells where a node failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BicReport {
    pub grid: PenaltyGrid,
    /// `[node][lambda1 index][lambda2 index]`.
    pub per_node: Vec<Vec<Vec<Option<f64>>>>,
    /// `[lambda1 index][lambda2 index]`, summed over nodes.
    pub total: Vec<Vec<Option<f64>>>,
    pub selected: Option<Selection>,
    pub failures: Vec<CellFailure>,
}

impl BicReport {
    /// Total BIC table as CSV, see [`matrix_csv`].
    pub fn total_csv(&self) -> String {
        matrix_csv(&self.grid, &self.total)
    }
}

/// Matrix over the grid as CSV: the header row holds the `lambda2` values,
/// the first column the `lambda1` values. Missing cells are empty.
pub fn matrix_csv(grid: &PenaltyGrid, values: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("lambda1\\lambda2");
    for v in &grid.lambda2 {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
    for (l1, row) in grid.lambda1.iter().zip(values) {
        let _ = write!(out, "{l1}");
        for v in row {
            match v {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Outcome of [`grid_search`].
#[derive(Debug, Clone)]
pub struct GridSearch {
    pub report: BicReport,
    /// Estimate at the selected cell.
    pub estimate: Option<TimeVaryingGraphEstimate>,
    /// `[lambda1 index][lambda2 index]`, filled when `keep_graphs` is set.
    pub graphs: Option<Vec<Vec<Option<GraphSequence>>>>,
    /// Solver iterations summed over all cells and nodes.
    pub iterations: usize,
}

/// Solves every node at every grid cell, scores each cell by the summed BIC
/// and selects the minimizer. Ties go to the smallest `lambda1` index, then
/// the smallest `lambda2` index. Nodes run in parallel within a `lambda1` row;
/// sums are formed in node order, so results do not depend on the thread count.
pub fn grid_search(
    data: &TimeSeriesDataset,
    grid: &PenaltyGrid,
    cfg: &SolverConfig,
    options: &GridOptions,
) -> Result<GridSearch> {
    grid.validate()?;
    cfg.validate()?;
    let (p, n) = (data.p(), data.n());
    let (rows, cols) = (grid.lambda1.len(), grid.lambda2.len());
    let problems = (0..p)
        .map(|a| NodeProblem::new(data, a))
        .collect::<Result<Vec<_>>>()?;

    let mut per_node = vec![vec![vec![None; cols]; rows]; p];
    let mut total = vec![vec![None; cols]; rows];
    let mut failures = Vec::new();
    let mut graphs = options.keep_graphs.then(|| vec![vec![None; cols]; rows]);
    let mut best: Option<(Selection, TimeVaryingGraphEstimate)> = None;
    let mut iterations = 0;

    for (i, &lambda1) in grid.lambda1.iter().enumerate() {
        let row: Vec<Vec<Result<(SolveResult, f64)>>> = problems
            .par_iter()
            .map(|problem| solve_row(problem, cfg, lambda1, &grid.lambda2, options))
            .collect();
        iterations += row
            .iter()
            .flatten()
            .filter_map(|r| r.as_ref().ok())
            .map(|(r, _)| r.iterations)
            .sum::<usize>();

        for j in 0..cols {
            let mut sum = 0.0;
            let mut complete = true;
            for (a, cells) in row.iter().enumerate() {
                match &cells[j] {
                    Ok((_, bic)) => {
                        per_node[a][i][j] = Some(*bic);
                        sum += bic;
                    }
                    Err(e) => {
                        complete = false;
                        warn!("grid cell ({i}, {j}) node {a}: {e}");
                        failures.push(CellFailure {
                            lambda1_index: i,
                            lambda2_index: j,
                            node: a,
                            message: e.to_string(),
                        });
                    }
                }
            }
            if !complete {
                continue;
            }
            total[i][j] = Some(sum);
            let improves = best.as_ref().is_none_or(|(s, _)| sum < s.total_bic);
            if !improves && graphs.is_none() {
                continue;
            }
            let results: Vec<SolveResult> = row
                .iter()
                .map(|cells| cells[j].as_ref().expect("complete cell").0.clone())
                .collect();
            let cell_cfg = cfg.with_lambdas(lambda1, grid.lambda2[j]);
            let estimate = assemble(results, Some(cell_cfg), &options.thresholds)?;
            if let Some(g) = graphs.as_mut() {
                g[i][j] = Some(estimate.graph.clone());
            }
            if improves {
                let selection = Selection {
                    lambda1_index: i,
                    lambda2_index: j,
                    lambda1,
                    lambda2: grid.lambda2[j],
                    total_bic: sum,
                };
                best = Some((selection, estimate));
            }
        }
    }
    debug_assert!(per_node.iter().all(|t| t.len() == rows) && n > 0);

    let (selected, estimate) = match best {
        Some((s, e)) => (Some(s), Some(e)),
        None => (None, None),
    };
    Ok(GridSearch {
        report: BicReport {
            grid: grid.clone(),
            per_node,
            total,
            selected,
            failures,
        },
        estimate,
        graphs,
        iterations,
    })
}

/// Solves one node along the `lambda2` values of one row and scores each solve.
fn solve_row(
    problem: &NodeProblem,
    cfg: &SolverConfig,
    lambda1: f64,
    lambda2: &[f64],
    options: &GridOptions,
) -> Vec<Result<(SolveResult, f64)>> {
    let mut warm: Option<ndarray::Array2<f64>> = None;
    lambda2
        .iter()
        .map(|&l2| {
            let cell = cfg.with_lambdas(lambda1, l2);
            let init = if options.warm_start { warm.as_ref().map(|w| w.view()) } else { None };
            let outcome = solve_problem(problem, &cell, init).and_then(|r| {
                let bic = node_bic(problem, &r, &options.thresholds)?;
                Ok((r, bic))
            });
            warm = outcome.as_ref().ok().map(|(r, _)| r.path.coeffs().to_owned());
            outcome.map_err(|e| e.at_node(problem.node()))
        })
        .collect()
}

fn node_bic(problem: &NodeProblem, result: &SolveResult, thresholds: &Thresholds) -> Result<f64> {
    let (model, _) = summarize_node(result, thresholds)?;
    let support = model.neighborhoods.iter().map(Vec::len).sum();
    let loss = problem.loss(result.path.coeffs())?;
    bic_value(loss, problem.n(), support, problem.node())
}

/// Default per-block penalty grid of the oracle: `2 * 0.9^k` for `k = 0..60`.
pub fn default_oracle_grid() -> Vec<f64> {
    (0..60).map(|k| 2.0 * 0.9f64.powi(k)).collect()
}

/// Oracle estimate together with the penalty chosen per node and block.
#[derive(Debug, Clone)]
pub struct OracleEstimate {
    pub estimate: TimeVaryingGraphEstimate,
    /// `[node][block]`.
    pub lambdas: Vec<Vec<f64>>,
}

/// Static lasso on the rows of every true block, with the penalty of each
/// node and block chosen from `grid` by
/// `log(RSS / n_j) + (log n_j / n_j) |S(theta)|`.
pub fn oracle_estimate(
    data: &TimeSeriesDataset,
    partition: &Partition,
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<OracleEstimate> {
    if partition.n() != data.n() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} time points, data has {}",
            partition.n(),
            data.n()
        )));
    }
    if grid.is_empty() || grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidConfig("oracle grid must be nonempty, finite and >= 0".into()));
    }
    for (block, size) in partition.block_sizes().into_iter().enumerate() {
        if size < 2 {
            return Err(Error::BlockTooSmall { block, size });
        }
    }
    cfg.validate()?;
    let per_node: Vec<(Vec<Array1<f64>>, Vec<f64>, NodeFit)> = (0..data.p())
        .into_par_iter()
        .map(|a| oracle_node(data, a, partition, grid, cfg).map_err(|e| e.at_node(a)))
        .collect::<Result<_>>()?;

    let mut node_paths = Vec::with_capacity(per_node.len());
    let mut node_models = Vec::with_capacity(per_node.len());
    let mut fits = Vec::with_capacity(per_node.len());
    let mut lambdas = Vec::with_capacity(per_node.len());
    for (a, (thetas, chosen, fit)) in per_node.into_iter().enumerate() {
        let path = piecewise_path(a, partition, &thetas)?;
        node_models.push(block_coefficients(&path, partition, 0.0)?);
        node_paths.push(path);
        fits.push(fit);
        lambdas.push(chosen);
    }
    let graph = graph_from_models(&node_models)?;
    Ok(OracleEstimate {
        estimate: TimeVaryingGraphEstimate {
            node_paths,
            node_models,
            graph,
            config: None,
            fits,
        },
        lambdas,
    })
}

fn oracle_node(
    data: &TimeSeriesDataset,
    node: usize,
    partition: &Partition,
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<Array1<f64>>, Vec<f64>, NodeFit)> {
    let problem = NodeProblem::new(data, node)?;
    let mut thetas = Vec::new();
    let mut chosen = Vec::new();
    let mut iterations = 0;
    let mut converged = true;
    let mut total_bic = 0.0;
    for rows in partition.blocks() {
        let size = rows.len();
        let lasso = StaticLasso::new(&problem, rows)?;
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        let mut warm: Option<Vec<f64>> = None;
        for &lambda in grid {
            let fit = lasso.solve(lambda, cfg, warm.as_deref())?;
            iterations += fit.iterations;
            converged &= fit.converged;
            let mut theta = fit.theta;
            for v in theta.iter_mut() {
                if v.abs() <= DEFAULT_ZERO_TOL {
                    *v = 0.0;
                }
            }
            warm = Some(theta.clone());
            let support = theta.iter().filter(|v| **v != 0.0).count();
            // a perfect fit has no finite score and is skipped
            let Ok(score) = bic_value(fit.rss, size, support, node) else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, lambda, theta));
            }
        }
        let (score, lambda, theta) = best.ok_or(Error::DegenerateFit { node, rss: 0.0 })?;
        total_bic += score;
        chosen.push(lambda);
        thetas.push(Array1::from(theta));
    }
    let fit = NodeFit {
        node,
        iterations,
        converged,
        objective: total_bic,
        fuse_tol: 0.0,
        zero_tol: DEFAULT_ZERO_TOL,
    };
    Ok((thetas, chosen, fit))
}
