//! Accuracy of estimated graphs and change points against a known truth, and
//! the simulation benchmark that aggregates them.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GraphSequence, Partition};
use crate::error::{Error, Result};
use crate::selection::{default_oracle_grid, grid_search, oracle_estimate, GridOptions, PenaltyGrid, Selection};
use crate::solver::SolverConfig;
use crate::synthetic::{sample_scenario, GroundTruthScenario, ScenarioKind, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `2 p r / (p + r)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Time-averaged precision and recall of `estimate` against the block-constant
/// true edge sets, and F1 of the two averages.
pub fn prf(estimate: &GraphSequence, truth: &GroundTruthScenario) -> Result<Prf> {
    let n = truth.partition.n();
    if estimate.n() != n {
        return Err(Error::LengthMismatch {
            estimate: estimate.n(),
            truth: n,
        });
    }
    let expanded = GraphSequence::new((0..n).map(|i| truth.edges_at(i).clone()).collect());
    prf_sequences(estimate, &expanded)
}

/// Precision and recall per time point, averaged over time. An empty
/// estimate scores precision 1 and an empty truth scores recall 1 at that
/// time point.
pub fn prf_sequences(estimate: &GraphSequence, truth: &GraphSequence) -> Result<Prf> {
    if estimate.n() != truth.n() || truth.n() == 0 {
        return Err(Error::LengthMismatch {
            estimate: estimate.n(),
            truth: truth.n(),
        });
    }
    let (mut precision, mut recall) = (0.0, 0.0);
    for (est, tru) in estimate.edges.iter().zip(&truth.edges) {
        let hits = est.intersection(tru).count() as f64;
        precision += if est.is_empty() { 1.0 } else { hits / est.len() as f64 };
        recall += if tru.is_empty() { 1.0 } else { hits / tru.len() as f64 };
    }
    let n = truth.n() as f64;
    let (precision, recall) = (precision / n, recall / n);
    Ok(Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// `h(T_est, T_true) = max_{b in T_true} min_{a in T_est} |a - b|` over the
/// interior boundaries of the truth. The fixed endpoints `1` and `n + 1`
/// count as estimated boundaries, so the distance stays finite when no
/// interior change is estimated. Zero when the truth has no interior boundary.
pub fn boundary_distance(estimated: &Partition, truth: &Partition) -> f64 {
    let candidates = estimated.boundaries();
    truth
        .interior()
        .iter()
        .map(|&b| {
            candidates
                .iter()
                .map(|&a| a.abs_diff(b))
                .min()
                .expect("partitions hold both endpoints")
        })
        .max()
        .unwrap_or(0) as f64
}

/// `|T_j - T_est_j|` for every interior boundary, when both partitions have
/// the same number of blocks.
pub fn boundary_abs_errors(estimated: &Partition, truth: &Partition) -> Option<Vec<usize>> {
    (estimated.num_blocks() == truth.num_blocks()).then(|| {
        estimated
            .interior()
            .iter()
            .zip(truth.interior())
            .map(|(a, b)| a.abs_diff(*b))
            .collect()
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `None` for an empty sample; the deviation of a single value is 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Change-point recovery of one node in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeBoundary {
    pub node: usize,
    pub num_blocks: usize,
    pub boundaries: Vec<usize>,
    pub hausdorff: f64,
    /// Present when the number of blocks matches the truth.
    pub abs_errors: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub seed: u64,
    pub selected: Option<Selection>,
    pub tdlasso: Prf,
    pub oracle: Prf,
    pub boundaries: Vec<NodeBoundary>,
    pub solver_iterations: usize,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
}

impl MethodSummary {
    fn of(values: &[Prf]) -> Option<Self> {
        let pick = |f: fn(&Prf) -> f64| Stat::of(&values.iter().map(f).collect::<Vec<_>>());
        Some(Self {
            precision: pick(|v| v.precision)?,
            recall: pick(|v| v.recall)?,
            f1: pick(|v| v.f1)?,
        })
    }
}

/// Boundary recovery over all (run, node) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundarySummary {
    pub pairs: usize,
    pub hausdorff: Option<Stat>,
    /// Pairs whose number of blocks matches the truth.
    pub matched_pairs: usize,
    /// Per true interior boundary, over the matched pairs.
    pub boundary_abs_errors: Option<Vec<Stat>>,
}

impl BoundarySummary {
    fn of(records: &[RunRecord]) -> Self {
        let nodes: Vec<&NodeBoundary> = records.iter().flat_map(|r| &r.boundaries).collect();
        let hausdorff: Vec<f64> = nodes.iter().map(|b| b.hausdorff).collect();
        let matched: Vec<&Vec<usize>> = nodes.iter().filter_map(|b| b.abs_errors.as_ref()).collect();
        let width = matched.first().map_or(0, |e| e.len());
        let errors = (!matched.is_empty()).then(|| {
            (0..width)
                .map(|j| {
                    let v: Vec<f64> = matched.iter().map(|e| e[j] as f64).collect();
                    Stat::of(&v).expect("nonempty")
                })
                .collect()
        });
        Self {
            pairs: nodes.len(),
            hausdorff: Stat::of(&hausdorff),
            matched_pairs: matched.len(),
            boundary_abs_errors: errors,
        }
    }
}

/// Metric averages over runs for every grid cell, `[lambda1 index][lambda2 index]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    pub precision: Vec<Vec<Option<f64>>>,
    pub recall: Vec<Vec<Option<f64>>>,
    pub f1: Vec<Vec<Option<f64>>>,
}

/// Settings of [`run_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchmarkConfig {
    pub kind: ScenarioKind,
    pub runs: usize,
    /// Run `r` in `1..=runs` uses seed `seed_base + r`.
    pub seed_base: u64,
    pub p: usize,
    pub block_sizes: Vec<usize>,
    pub grid: PenaltyGrid,
    pub solver: SolverConfig,
    pub options: GridOptions,
    pub oracle_grid: Vec<f64>,
}

impl BenchmarkConfig {
    /// `p = 30`, blocks `[80, 130, 90]`, the `default10` grid.
    pub fn standard(kind: ScenarioKind, runs: usize, seed_base: u64) -> Self {
        let spec = ScenarioSpec::standard(kind, 0);
        Self {
            kind,
            runs,
            seed_base,
            p: spec.p,
            block_sizes: spec.block_sizes,
            grid: PenaltyGrid::default10(),
            solver: SolverConfig::new(1.0, 1.0),
            options: GridOptions::default(),
            oracle_grid: default_oracle_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub tdlasso: Option<MethodSummary>,
    pub oracle: Option<MethodSummary>,
    pub boundary: BoundarySummary,
    pub runs: usize,
    pub failures: usize,
    pub failed_runs: Vec<RunFailure>,
    pub run_records: Vec<RunRecord>,
    pub grid_metrics: GridMetrics,
}

struct RunOutcome {
    record: RunRecord,
    cells: Vec<Vec<Option<Prf>>>,
}

/// Simulates `runs` scenarios, selects penalties by BIC on each, and scores
/// the selected estimate and the oracle against the truth. Failed runs are
/// excluded and counted.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<EvalReport> {
    if cfg.runs == 0 {
        return Err(Error::InvalidConfig("runs must be at least 1".into()));
    }
    cfg.grid.validate()?;
    cfg.solver.validate()?;
    let options = GridOptions {
        keep_graphs: true,
        ..cfg.options
    };
    let outcomes: Vec<(u64, Result<RunOutcome>)> = (1..=cfg.runs as u64)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed_base.wrapping_add(r);
            (seed, benchmark_run(cfg, &options, seed))
        })
        .collect();

    let (rows, cols) = (cfg.grid.lambda1.len(), cfg.grid.lambda2.len());
    let mut records = Vec::new();
    let mut failed_runs = Vec::new();
    let mut cell_values: Vec<Vec<Vec<Prf>>> = vec![vec![Vec::new(); cols]; rows];
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                for (i, row) in o.cells.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        if let Some(v) = v {
                            cell_values[i][j].push(*v);
                        }
                    }
                }
                records.push(o.record);
            }
            Err(e) => {
                warn!("benchmark run with seed {seed} failed: {e}");
                failed_runs.push(RunFailure {
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }
    let cell_mean = |f: fn(&Prf) -> f64| -> Vec<Vec<Option<f64>>> {
        cell_values
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| Stat::of(&v.iter().map(f).collect::<Vec<_>>()).map(|s| s.mean))
                    .collect()
            })
            .collect()
    };
    let grid_metrics = GridMetrics {
        precision: cell_mean(|v| v.precision),
        recall: cell_mean(|v| v.recall),
        f1: cell_mean(|v| v.f1),
    };
    let tdlasso: Vec<Prf> = records.iter().map(|r| r.tdlasso).collect();
    let oracle: Vec<Prf> = records.iter().map(|r| r.oracle).collect();
    Ok(EvalReport {
        tdlasso: MethodSummary::of(&tdlasso),
        oracle: MethodSummary::of(&oracle),
        boundary: BoundarySummary::of(&records),
        runs: cfg.runs,
        failures: failed_runs.len(),
        failed_runs,
        run_records: records,
        grid_metrics,
    })
}

fn benchmark_run(cfg: &BenchmarkConfig, options: &GridOptions, seed: u64) -> Result<RunOutcome> {
    let spec = ScenarioSpec {
        kind: cfg.kind,
        p: cfg.p,
        block_sizes: cfg.block_sizes.clone(),
        seed,
    };
    let (raw, truth) = sample_scenario(&spec)?;
    let data = raw.standardize()?;
    let search = grid_search(&data, &cfg.grid, &cfg.solver, options)?;
    let estimate = search
        .estimate
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("every grid cell failed".into()))?;
    let tdlasso = prf(&estimate.graph, &truth)?;
    let boundaries = estimate
        .node_models
        .iter()
        .map(|m| NodeBoundary {
            node: m.node,
            num_blocks: m.partition.num_blocks(),
            boundaries: m.partition.boundaries().to_vec(),
            hausdorff: boundary_distance(&m.partition, &truth.partition),
            abs_errors: boundary_abs_errors(&m.partition, &truth.partition),
        })
        .collect();
    let oracle = oracle_estimate(&data, &truth.partition, &cfg.oracle_grid, &cfg.solver)?;
    let oracle = prf(&oracle.estimate.graph, &truth)?;
    let cells = search
        .graphs
        .as_ref()
        .expect("graphs kept")
        .iter()
        .map(|row| {
            row.iter()
                .map(|g| g.as_ref().map(|g| prf(g, &truth)).transpose())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunOutcome {
        record: RunRecord {
            seed,
            selected: search.report.selected.clone(),
            tdlasso,
            oracle,
            boundaries,
            solver_iterations: search.iterations,
            failed_cells: search.report.failures.len(),
        },
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn seq(sets: &[&[(usize, usize)]]) -> GraphSequence {
        GraphSequence::new(sets.iter().map(|s| s.iter().copied().collect::<BTreeSet<_>>()).collect())
    }

    #[test]
    fn perfect_estimate() {
        let t = seq(&[&[(0, 1)], &[(1, 2)]]);
        let m = prf_sequences(&t, &t).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_estimate_conventions() {
        let t = seq(&[&[(0, 1)], &[(0, 1)]]);
        let m = prf_sequences(&GraphSequence::empty(2), &t).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 0.0, 0.0));
    }

    #[test]
    fn hand_counted_example() {
        let t = seq(&[&[(0, 1)], &[(0, 1)]]);
        let e = seq(&[&[(0, 1), (0, 2)], &[(0, 1), (0, 2)]]);
        let m = prf_sequences(&e, &t).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            prf_sequences(&GraphSequence::empty(3), &t),
            Err(Error::LengthMismatch { estimate: 3, truth: 2 })
        ));
    }

    #[test]
    fn boundary_distance_examples() {
        let truth = Partition::new(vec![1, 81, 211, 301]).unwrap();
        assert_eq!(boundary_distance(&truth, &truth), 0.0);
        let est = Partition::new(vec![1, 78, 205, 250, 301]).unwrap();
        assert_eq!(boundary_distance(&est, &truth), 6.0);
        assert_eq!(boundary_abs_errors(&est, &truth), None);
        let est = Partition::new(vec![1, 85, 200, 301]).unwrap();
        assert_eq!(boundary_abs_errors(&est, &truth), Some(vec![4, 11]));
        assert_eq!(boundary_distance(&Partition::trivial(300), &truth), 90.0);
        assert_eq!(boundary_distance(&truth, &Partition::trivial(300)), 0.0);
    }

    #[test]
    fn stat_sample_deviation() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[5.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
