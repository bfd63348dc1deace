//! Piecewise-stationary Gaussian scenarios with known graphs.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{edge, Edge, Partition, TimeSeriesDataset};
use crate::error::{Error, Result};

/// Generator used for every scenario; seeded from a 64-bit value.
pub type ScenarioRng = ChaCha8Rng;

/// Entries of a precision matrix at or below this magnitude are not edges.
pub const EDGE_TOL: f64 = 1e-12;

const MAX_GEOMETRY_RETRIES: usize = 10;
const MAX_SCENARIO_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Chain,
    Nn,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(Self::Chain),
            "nn" => Ok(Self::Nn),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario kind '{other}', expected 'chain' or 'nn'"
            ))),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Chain => "chain",
            Self::Nn => "nn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub p: usize,
    pub block_sizes: Vec<usize>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// 30 variables, blocks of 80, 130 and 90 observations.
    pub fn standard(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            p: 30,
            block_sizes: vec![80, 130, 90],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Diagnostics {
    /// Shortest block length.
    pub delta_min: usize,
    /// Smallest jump `||theta^{a,j+1} - theta^{a,j}||_2` over nodes and
    /// boundaries; absent for a single block.
    pub xi_min: Option<f64>,
    /// Smallest nonzero `|theta^{a,j}_b|`; absent when no node has neighbors.
    pub theta_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScenario {
    pub kind: ScenarioKind,
    pub partition: Partition,
    pub covariances: Vec<Array2<f64>>,
    pub precisions: Vec<Array2<f64>>,
    pub true_edges: Vec<BTreeSet<Edge>>,
    pub diagnostics: Diagnostics,
    pub seed: u64,
}

impl GroundTruthScenario {
    pub fn p(&self) -> usize {
        self.covariances[0].nrows()
    }

    /// True edge set at 0-based time `i`.
    pub fn edges_at(&self, i: usize) -> &BTreeSet<Edge> {
        &self.true_edges[self.partition.block_of(i)]
    }

    /// Regression coefficients `theta^{a,j}_b = -omega_ab / omega_aa`, indexed `[j][a][b]`.
    pub fn thetas(&self) -> Vec<Array2<f64>> {
        self.precisions.iter().map(regression_coefficients).collect()
    }
}

/// Covariance and precision of a chain graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub covariance: Array2<f64>,
    pub precision: Array2<f64>,
}

/// `sigma_ab = exp(-|t_{pi(a)} - t_{pi(b)}| / 2)` for a random permutation
/// `pi` and positions with `Unif(0.5, 1)` spacings.
pub fn chain_covariance(p: usize, rng: &mut impl Rng) -> Array2<f64> {
    chain_model(p, rng).covariance
}

pub fn chain_model(p: usize, rng: &mut impl Rng) -> ChainModel {
    let mut rank: Vec<usize> = (0..p).collect();
    rank.shuffle(rng);
    let spacings: Vec<f64> = (1..p).map(|_| rng.gen_range(0.5..1.0)).collect();
    chain_model_from(&rank, &spacings)
}

/// Chain model with node `a` placed at position rank `rank[a]`; `spacings[k]`
/// separates ranks `k` and `k + 1`.
///
/// The precision is the exact inverse: tridiagonal in rank order with
/// `rho_k = exp(-spacing_k / 2)` between neighbors.
pub fn chain_model_from(rank: &[usize], spacings: &[f64]) -> ChainModel {
    let p = rank.len();
    assert_eq!(spacings.len() + 1, p, "need p - 1 spacings");
    let mut position = vec![0.0; p];
    for k in 1..p {
        position[k] = position[k - 1] + spacings[k - 1];
    }
    let covariance = Array2::from_shape_fn((p, p), |(a, b)| {
        if a == b {
            1.0
        } else {
            (-(position[rank[a]] - position[rank[b]]).abs() / 2.0).exp()
        }
    });

    let mut node_at = vec![0; p];
    for (a, &r) in rank.iter().enumerate() {
        node_at[r] = a;
    }
    let rho: Vec<f64> = spacings.iter().map(|s| (-s / 2.0).exp()).collect();
    let mut precision = Array2::zeros((p, p));
    for k in 0..p {
        let mut diag = if k == 0 { 1.0 } else { 1.0 / (1.0 - rho[k - 1] * rho[k - 1]) };
        if k + 1 < p {
            let r = rho[k];
            diag += r * r / (1.0 - r * r);
            let off = -r / (1.0 - r * r);
            let (a, b) = (node_at[k], node_at[k + 1]);
            precision[[a, b]] = off;
            precision[[b, a]] = off;
        }
        let a = node_at[k];
        precision[[a, a]] = diag;
    }
    ChainModel {
        covariance,
        precision,
    }
}

/// Support graph of a nearest-neighbor network: every node is joined to its
/// `degree` closest points, then random excess edges are removed until no
/// node has more than `degree` neighbors.
pub fn nn_graph(p: usize, degree: usize, rng: &mut impl Rng) -> Result<BTreeSet<Edge>> {
    if p <= degree {
        return Err(Error::InvalidConfig(format!(
            "nearest-neighbor networks need p > degree, got p = {p}, degree = {degree}"
        )));
    }
    for _ in 0..MAX_GEOMETRY_RETRIES {
        let points: Vec<(f64, f64)> = (0..p).map(|_| (rng.gen(), rng.gen())).collect();
        let dist = |a: usize, b: usize| {
            let (dx, dy) = (points[a].0 - points[b].0, points[a].1 - points[b].1);
            (dx * dx + dy * dy).sqrt()
        };
        let degenerate = (0..p).any(|a| (a + 1..p).any(|b| dist(a, b) == 0.0));
        if degenerate {
            continue;
        }

        let mut edges = BTreeSet::new();
        for a in 0..p {
            let mut others: Vec<usize> = (0..p).filter(|&b| b != a).collect();
            others.sort_by(|&b, &c| dist(a, b).total_cmp(&dist(a, c)).then(b.cmp(&c)));
            for &b in &others[..degree] {
                edges.insert(edge(a, b));
            }
        }
        prune_degrees(&mut edges, p, degree, rng);
        return Ok(edges);
    }
    Err(Error::DegenerateGeometry(MAX_GEOMETRY_RETRIES))
}

fn prune_degrees(edges: &mut BTreeSet<Edge>, p: usize, degree: usize, rng: &mut impl Rng) {
    let incident = |edges: &BTreeSet<Edge>, a: usize| -> Vec<Edge> {
        edges.iter().copied().filter(|&(u, v)| u == a || v == a).collect()
    };
    loop {
        let mut order: Vec<usize> = (0..p).filter(|&a| incident(edges, a).len() > degree).collect();
        if order.is_empty() {
            return;
        }
        order.shuffle(rng);
        for a in order {
            let inc = incident(edges, a);
            if inc.len() > degree {
                let victim = inc[rng.gen_range(0..inc.len())];
                edges.remove(&victim);
            }
        }
    }
}

/// Precision before rescaling: off-diagonal support from [`nn_graph`] with
/// values `Unif([-1, -0.5] U [0.5, 1])`, diagonal `|lambda_min(A)| + 0.1`
/// where `A` is the off-diagonal part.
pub fn nn_raw_precision(p: usize, degree: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let edges = nn_graph(p, degree, rng)?;
    let mut omega = Array2::zeros((p, p));
    for &(a, b) in &edges {
        let magnitude: f64 = rng.gen_range(0.5..=1.0);
        let value = if rng.gen::<bool>() { magnitude } else { -magnitude };
        omega[[a, b]] = value;
        omega[[b, a]] = value;
    }
    let shift = min_eigenvalue(&omega).abs() + 0.1;
    for a in 0..p {
        omega[[a, a]] = shift;
    }
    Ok(omega)
}

/// Nearest-neighbor precision whose covariance has unit diagonal.
pub fn nn_precision(p: usize, degree: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let raw = nn_raw_precision(p, degree, rng)?;
    Ok(rescale_to_unit_covariance(&raw)?.1)
}

/// Rescales `Sigma = raw^-1` to unit diagonal `D Sigma D` and returns it with
/// its inverse `D^-1 raw D^-1`.
pub fn rescale_to_unit_covariance(raw: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let sigma = inverse(raw)?;
    let scale: Vec<f64> = sigma.diag().iter().map(|v| v.sqrt()).collect();
    let p = raw.nrows();
    let covariance = Array2::from_shape_fn((p, p), |(a, b)| {
        if a == b {
            1.0
        } else {
            sigma[[a, b]] / (scale[a] * scale[b])
        }
    });
    let precision = Array2::from_shape_fn((p, p), |(a, b)| raw[[a, b]] * scale[a] * scale[b]);
    Ok((covariance, precision))
}

/// Draws one covariance/precision pair per block and samples the observations.
pub fn sample_scenario(spec: &ScenarioSpec) -> Result<(TimeSeriesDataset, GroundTruthScenario)> {
    if spec.block_sizes.is_empty() || spec.block_sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "block sizes must be positive, got {:?}",
            spec.block_sizes
        )));
    }
    if spec.p < 2 {
        return Err(Error::InvalidConfig(format!("need p >= 2, got {}", spec.p)));
    }
    let partition = Partition::from_block_sizes(&spec.block_sizes)?;
    let mut rng = ScenarioRng::seed_from_u64(spec.seed);

    let mut attempt = 0;
    let (covariances, precisions, diagnostics) = loop {
        let mut covariances = Vec::new();
        let mut precisions = Vec::new();
        for _ in &spec.block_sizes {
            let (cov, prec) = match spec.kind {
                ScenarioKind::Chain => {
                    let model = chain_model(spec.p, &mut rng);
                    (model.covariance, model.precision)
                }
                ScenarioKind::Nn => {
                    let raw = nn_raw_precision(spec.p, 4, &mut rng)?;
                    rescale_to_unit_covariance(&raw)?
                }
            };
            covariances.push(cov);
            precisions.push(prec);
        }
        let diagnostics = diagnostics(&partition, &precisions);
        attempt += 1;
        let degenerate = diagnostics.xi_min.is_some_and(|xi| xi <= 0.0);
        if !degenerate || attempt >= MAX_SCENARIO_RETRIES {
            break (covariances, precisions, diagnostics);
        }
    };

    let n = partition.n();
    let mut values = Array2::zeros((n, spec.p));
    for (range, cov) in partition.blocks().zip(&covariances) {
        let factor = cholesky_lower(cov)?;
        for i in range {
            let z: Vec<f64> = (0..spec.p).map(|_| rng.sample(StandardNormal)).collect();
            for a in 0..spec.p {
                values[[i, a]] = (0..=a).map(|k| factor[[a, k]] * z[k]).sum();
            }
        }
    }

    let true_edges = precisions.iter().map(support_edges).collect();
    let truth = GroundTruthScenario {
        kind: spec.kind,
        partition,
        covariances,
        precisions,
        true_edges,
        diagnostics,
        seed: spec.seed,
    };
    Ok((TimeSeriesDataset::new(values)?, truth))
}

/// `{(a, b) : a < b, |omega_ab| > EDGE_TOL}`.
pub fn support_edges(precision: &Array2<f64>) -> BTreeSet<Edge> {
    let p = precision.nrows();
    (0..p)
        .flat_map(|a| (a + 1..p).map(move |b| (a, b)))
        .filter(|&(a, b)| precision[[a, b]].abs() > EDGE_TOL)
        .collect()
}

/// `theta[a][b] = -omega_ab / omega_aa` (zero on the diagonal).
pub fn regression_coefficients(precision: &Array2<f64>) -> Array2<f64> {
    let p = precision.nrows();
    Array2::from_shape_fn((p, p), |(a, b)| {
        if a == b {
            0.0
        } else {
            -precision[[a, b]] / precision[[a, a]]
        }
    })
}

pub fn diagnostics(partition: &Partition, precisions: &[Array2<f64>]) -> Diagnostics {
    let thetas: Vec<Array2<f64>> = precisions.iter().map(regression_coefficients).collect();
    let delta_min = partition.block_sizes().into_iter().min().unwrap_or(0);
    let xi_min = thetas
        .windows(2)
        .flat_map(|w| {
            let diff = &w[1] - &w[0];
            diff.rows()
                .into_iter()
                .map(|r| r.dot(&r).sqrt())
                .collect::<Vec<_>>()
        })
        .reduce(f64::min);
    let theta_min = thetas
        .iter()
        .flat_map(|t| t.iter().copied().collect::<Vec<_>>())
        .map(f64::abs)
        .filter(|&v| v > EDGE_TOL)
        .reduce(f64::min);
    Diagnostics {
        delta_min,
        xi_min,
        theta_min,
    }
}

pub(crate) fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(to_nalgebra(a)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    symmetric_eigenvalues(a)[0]
}

pub fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    to_nalgebra(a)
        .try_inverse()
        .map(|m| from_nalgebra(&m))
        .ok_or_else(|| Error::LinearAlgebra("matrix is singular".into()))
}

/// Lower-triangular `L` with `L L' = a`.
pub fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    nalgebra::Cholesky::new(to_nalgebra(a))
        .map(|c| from_nalgebra(&c.l()))
        .ok_or_else(|| Error::LinearAlgebra("matrix is not positive definite".into()))
}
