//! Observations, coefficient paths, partitions and graphs.
//!
//! Conventions used across the crate:
//!
//! * node (variable) labels are 0-based column indices of the dataset;
//! * positions inside arrays (time points, rows) are 0-based;
//! * partition boundaries are 1-based time indices, `T_0 = 1 < ... < T_B = n + 1`,
//!   so block `j` covers the 1-based indices `[T_{j-1}, T_j)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold below which averaged block coefficients are declared zero.
pub const DEFAULT_ZERO_TOL: f64 = 1e-6;

/// Relative factor for the default change-point threshold, see [`default_fuse_tol`].
pub const DEFAULT_FUSE_TOL_FACTOR: f64 = 1e-4;

/// An `n x p` matrix of observations, one row per time point.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    values: Array2<f64>,
}

impl TimeSeriesDataset {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, p) = values.dim();
        if n < 2 || p < 2 {
            return Err(Error::TooSmall { n, p });
        }
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: row + 1,
                col: col + 1,
            });
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn column(&self, a: usize) -> ArrayView1<'_, f64> {
        self.values.column(a)
    }

    /// Rescales every column to empirical mean 0 and variance 1 (1/n convention).
    pub fn standardize(&self) -> Result<Self> {
        let n = self.n() as f64;
        let mut out = self.values.clone();
        for (a, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let mean = col.sum() / n;
            col.mapv_inplace(|v| v - mean);
            let var = col.iter().map(|v| v * v).sum::<f64>() / n;
            if !(var > f64::EPSILON * f64::EPSILON) {
                return Err(Error::ZeroVariance(a));
            }
            let sd = var.sqrt();
            col.mapv_inplace(|v| v / sd);
        }
        Ok(Self { values: out })
    }

    /// Restricts the dataset to the 0-based row range.
    pub fn rows(&self, range: Range<usize>) -> Result<Self> {
        Self::new(self.values.slice(ndarray::s![range, ..]).to_owned())
    }

    /// Reorders the variables so that new column `k` is old column `order[k]`.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(1), order),
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.p()).map(|a| format!("x{a}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in self.values.rows() {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                // `{}` prints the shortest representation that round-trips exactly.
                write!(out, "{v}").expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Reads a rectangular numeric CSV file. A first row containing any
/// non-numeric cell is treated as a header and skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut first = true;
    for record in reader.records() {
        let record = record?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if first {
            first = false;
            if record.iter().any(|c| c.parse::<f64>().is_err()) {
                continue;
            }
        }
        let row = rows.len() + 1;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::NonRectangular {
                row,
                expected,
                found: record.len(),
            });
        }
        let mut values = Vec::with_capacity(expected);
        for (k, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse { row, col: k + 1 })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: k + 1 });
            }
            values.push(v);
        }
        rows.push(values);
    }
    let n = rows.len();
    let p = width.unwrap_or(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, p), flat)
        .map_err(|e| Error::shape(format!("{n}x{p}"), e.to_string()))?;
    TimeSeriesDataset::new(values)
}

/// Regression coefficients of one node on all other nodes, one column per time point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPath {
    node: usize,
    coeffs: Array2<f64>,
    column_index_map: Vec<usize>,
}

impl CoefficientPath {
    /// `coeffs` has shape `(p - 1) x n`; row `r` holds the coefficient on the
    /// `r`-th variable of `0..p` with `node` removed.
    pub fn new(node: usize, coeffs: Array2<f64>) -> Result<Self> {
        let p = coeffs.nrows() + 1;
        if node >= p {
            return Err(Error::shape(format!("node < {p}"), format!("node {node}")));
        }
        if coeffs.ncols() < 1 {
            return Err(Error::shape("at least one time point", "none"));
        }
        Ok(Self {
            node,
            coeffs,
            column_index_map: others(node, p),
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn n(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn p(&self) -> usize {
        self.coeffs.nrows() + 1
    }

    pub fn coeffs(&self) -> ArrayView2<'_, f64> {
        self.coeffs.view()
    }

    pub fn into_coeffs(self) -> Array2<f64> {
        self.coeffs
    }

    pub fn column_index_map(&self) -> &[usize] {
        &self.column_index_map
    }

    /// Coefficient on variable `other` at 0-based time `i`.
    pub fn coefficient(&self, other: usize, i: usize) -> f64 {
        self.coeffs[[row_of(self.node, other), i]]
    }

    /// Largest `l2` norm of a time column.
    pub fn max_column_norm(&self) -> f64 {
        self.coeffs
            .axis_iter(Axis(1))
            .map(|c| c.dot(&c).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Variables other than `node`, ascending.
pub fn others(node: usize, p: usize) -> Vec<usize> {
    (0..p).filter(|&b| b != node).collect()
}

/// Row of variable `other` in the coefficient matrix of `node`.
pub fn row_of(node: usize, other: usize) -> usize {
    debug_assert_ne!(node, other);
    if other < node {
        other
    } else {
        other - 1
    }
}

/// Strictly increasing 1-based boundaries `1 = T_0 < T_1 < ... < T_B = n + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Partition {
    boundaries: Vec<usize>,
}

impl Partition {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::InvalidPartition(
                "need at least the two endpoints".into(),
            ));
        }
        if boundaries[0] != 1 {
            return Err(Error::InvalidPartition(format!(
                "first boundary must be 1, got {}",
                boundaries[0]
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPartition(format!(
                "boundaries not strictly increasing: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    /// A partition for consecutive blocks of the given sizes.
    pub fn from_block_sizes(sizes: &[usize]) -> Result<Self> {
        let mut boundaries = vec![1];
        for &s in sizes {
            boundaries.push(boundaries.last().unwrap() + s);
        }
        Self::new(boundaries)
    }

    /// Single block covering `n` time points.
    pub fn trivial(n: usize) -> Self {
        Self {
            boundaries: vec![1, n + 1],
        }
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Boundaries without the fixed endpoints.
    pub fn interior(&self) -> &[usize] {
        &self.boundaries[1..self.boundaries.len() - 1]
    }

    pub fn n(&self) -> usize {
        self.boundaries[self.boundaries.len() - 1] - 1
    }

    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// 0-based index ranges of the blocks.
    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| (w[0] - 1)..(w[1] - 1))
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Block containing the 0-based time index `i`.
    pub fn block_of(&self, i: usize) -> usize {
        self.boundaries[1..].partition_point(|&t| t <= i + 1)
    }
}

impl TryFrom<Vec<usize>> for Partition {
    type Error = Error;

    fn try_from(value: Vec<usize>) -> Result<Self> {
        Partition::new(value)
    }
}

impl From<Partition> for Vec<usize> {
    fn from(p: Partition) -> Self {
        p.boundaries
    }
}

/// Per-block coefficients and neighborhoods of a single node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockModel {
    pub node: usize,
    pub partition: Partition,
    /// One vector of length `p - 1` per block, rows ordered as in [`CoefficientPath`].
    pub thetas: Vec<Vec<f64>>,
    /// Neighbor variable labels (not row positions) per block.
    pub neighborhoods: Vec<Vec<usize>>,
}

impl BlockModel {
    /// Piecewise-constant `(p - 1) x n` path that repeats each block vector.
    pub fn path(&self) -> Result<CoefficientPath> {
        let thetas: Vec<Array1<f64>> = self.thetas.iter().cloned().map(Array1::from).collect();
        piecewise_path(self.node, &self.partition, &thetas)
    }
}

/// Unordered edge `(a, b)` with `a < b`.
pub type Edge = (usize, usize);

pub fn edge(a: usize, b: usize) -> Edge {
    debug_assert_ne!(a, b);
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// One edge set per time point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSequence {
    pub edges: Vec<BTreeSet<Edge>>,
}

impl GraphSequence {
    pub fn new(edges: Vec<BTreeSet<Edge>>) -> Self {
        debug_assert!(edges.iter().flatten().all(|&(a, b)| a < b));
        Self { edges }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            edges: vec![BTreeSet::new(); n],
        }
    }

    pub fn n(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_counts(&self) -> Vec<usize> {
        self.edges.iter().map(BTreeSet::len).collect()
    }
}

/// `1e-4` times the largest column norm of the path.
pub fn default_fuse_tol(path: &CoefficientPath) -> f64 {
    DEFAULT_FUSE_TOL_FACTOR * path.max_column_norm()
}

/// Declares a change point at every 1-based index `i` in `2..=n` where
/// `||beta_i - beta_{i-1}||_2 > fuse_tol`.
pub fn extract_partition(path: &CoefficientPath, fuse_tol: f64) -> Partition {
    let coeffs = path.coeffs();
    let n = coeffs.ncols();
    let mut boundaries = vec![1];
    for i in 1..n {
        let jump: f64 = coeffs
            .column(i)
            .iter()
            .zip(coeffs.column(i - 1))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if jump > fuse_tol {
            boundaries.push(i + 1);
        }
    }
    boundaries.push(n + 1);
    Partition { boundaries }
}

/// Averages the path over each block and zeroes entries with magnitude `<= zero_tol`.
pub fn block_coefficients(
    path: &CoefficientPath,
    partition: &Partition,
    zero_tol: f64,
) -> Result<BlockModel> {
    if partition.n() != path.n() {
        return Err(Error::shape(
            format!("partition over {} time points", path.n()),
            format!("partition over {}", partition.n()),
        ));
    }
    let coeffs = path.coeffs();
    let mut thetas = Vec::with_capacity(partition.num_blocks());
    let mut neighborhoods = Vec::with_capacity(partition.num_blocks());
    for range in partition.blocks() {
        let block = coeffs.slice(ndarray::s![.., range]);
        let mut theta: Array1<f64> = block
            .mean_axis(Axis(1))
            .expect("blocks are nonempty");
        theta.mapv_inplace(|v| if v.abs() <= zero_tol { 0.0 } else { v });
        neighborhoods.push(
            theta
                .iter()
                .zip(path.column_index_map())
                .filter(|(v, _)| **v != 0.0)
                .map(|(_, &b)| b)
                .collect(),
        );
        thetas.push(theta.to_vec());
    }
    Ok(BlockModel {
        node: path.node(),
        partition: partition.clone(),
        thetas,
        neighborhoods,
    })
}

/// Expands per-block vectors into a `(p - 1) x n` piecewise-constant path.
pub fn piecewise_path(node: usize, partition: &Partition, thetas: &[Array1<f64>]) -> Result<CoefficientPath> {
    let m = thetas.first().map_or(0, |t| t.len());
    if thetas.len() != partition.num_blocks() || thetas.iter().any(|t| t.len() != m) {
        return Err(Error::shape(
            format!("{} block vectors", partition.num_blocks()),
            format!("{}", thetas.len()),
        ));
    }
    let mut coeffs = Array2::zeros((m, partition.n()).f());
    for (range, theta) in partition.blocks().zip(thetas) {
        for i in range {
            coeffs.column_mut(i).assign(theta);
        }
    }
    CoefficientPath::new(node, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loads_plain_csv() {
        let d = parse_csv("1,2\n3,4\n5,6").unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.values()[[2, 1]], 6.0);
    }

    #[test]
    fn skips_header_row() {
        let d = parse_csv("x1,x2\n1,2\n3,4\n").unwrap();
        assert_eq!((d.n(), d.p()), (2, 2));
        assert_eq!(d.values()[[0, 0]], 1.0);
    }

    #[test]
    fn rejects_nan_and_garbage() {
        assert!(matches!(
            parse_csv("1,2\nnan,4\n5,6"),
            Err(Error::NonFinite { row: 2, col: 1 })
        ));
        assert!(matches!(
            parse_csv("1,2\n3,abc\n5,6"),
            Err(Error::Parse { row: 2, col: 2 })
        ));
        assert!(matches!(
            parse_csv("1,2\n3\n5,6"),
            Err(Error::NonRectangular { row: 2, .. })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_dataset("/definitely/not/here.csv"),
            Err(Error::FileNotFound(_))
        ));
    }

    #[test]
    fn standardize_examples() {
        let d = TimeSeriesDataset::new(array![[1.0, -1.0, 0.0], [1.0, 1.0, 2.0]]).unwrap();
        assert!(matches!(d.standardize(), Err(Error::ZeroVariance(0))));

        let d = TimeSeriesDataset::new(array![[-1.0, 0.0], [1.0, 2.0]]).unwrap();
        let s = d.standardize().unwrap();
        assert_eq!(s.values(), array![[-1.0, -1.0], [1.0, 1.0]]);
    }

    #[test]
    fn partition_accessors() {
        let p = Partition::from_block_sizes(&[80, 130, 90]).unwrap();
        assert_eq!(p.boundaries(), &[1, 81, 211, 301]);
        assert_eq!(p.interior(), &[81, 211]);
        assert_eq!(p.n(), 300);
        assert_eq!(p.block_of(0), 0);
        assert_eq!(p.block_of(79), 0);
        assert_eq!(p.block_of(80), 1);
        assert_eq!(p.block_of(299), 2);
        assert!(Partition::new(vec![1, 3, 3, 5]).is_err());
        assert!(Partition::new(vec![2, 5]).is_err());
    }

    fn path_from_columns(cols: &[&[f64]]) -> CoefficientPath {
        let m = cols[0].len();
        let mut coeffs = Array2::zeros((m, cols.len()));
        for (i, c) in cols.iter().enumerate() {
            coeffs.column_mut(i).assign(&ArrayView1::from(*c));
        }
        CoefficientPath::new(0, coeffs).unwrap()
    }

    #[test]
    fn partition_extraction() {
        let c = [0.3, -0.2];
        let path = path_from_columns(&[&c, &c, &c, &c]);
        assert_eq!(extract_partition(&path, 0.0).boundaries(), &[1, 5]);

        let d = [0.1, 0.4];
        let path = path_from_columns(&[&c, &c, &c, &d, &d, &d]);
        assert_eq!(extract_partition(&path, 0.0).boundaries(), &[1, 4, 7]);

        let e = [0.3 + 1e-8, -0.2];
        let path = path_from_columns(&[&c, &c, &e, &e]);
        assert_eq!(extract_partition(&path, 1e-6).boundaries(), &[1, 5]);
    }

    #[test]
    fn block_coefficient_thresholding() {
        let c = [0.5, 1e-12];
        let path = path_from_columns(&[&c, &c]);
        let model = block_coefficients(&path, &Partition::trivial(2), 1e-8).unwrap();
        assert_eq!(model.thetas, vec![vec![0.5, 0.0]]);
        // row 0 of node 0 is variable 1
        assert_eq!(model.neighborhoods, vec![vec![1]]);

        let d = [-0.25, 0.75];
        let path = path_from_columns(&[&c, &d, &d]);
        let part = extract_partition(&path, 0.0);
        let model = block_coefficients(&path, &part, 1e-8).unwrap();
        assert_eq!(model.thetas, vec![vec![0.5, 0.0], vec![-0.25, 0.75]]);
        assert_eq!(model.neighborhoods, vec![vec![1], vec![1, 2]]);
    }

    #[test]
    fn coefficient_lookup_skips_own_node() {
        let coeffs = array![[1.0], [2.0], [3.0]];
        let path = CoefficientPath::new(2, coeffs).unwrap();
        assert_eq!(path.column_index_map(), &[0, 1, 3]);
        assert_eq!(path.coefficient(0, 0), 1.0);
        assert_eq!(path.coefficient(3, 0), 3.0);
    }
}
