//! Smoothed accelerated proximal-gradient solver for the temporally fused
//! neighborhood regression of a single node.
//!
//! For node `a` the objective over `beta` (shape `(p - 1) x n`, one column per
//! time point) is
//!
//! ```text
//! F(beta) = sum_i (x_{i,a} - <x_{i,\a}, beta_i>)^2
//!         + 2 lambda1 sum_{i>=2} ||beta_i - beta_{i-1}||_2
//!         + 2 lambda2 ||beta||_1
//! ```
//!
//! The fusion term is replaced by its smooth surrogate `Psi_mu`, whose
//! gradient is Lipschitz, and the `l1` term is handled exactly through
//! soft-thresholding.
//!
//! Matrices handed to the hot loops are stored column-major so that every
//! time column is a contiguous slice of length `p - 1`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, ShapeBuilder};

use crate::data::{default_fuse_tol, CoefficientPath, TimeSeriesDataset, DEFAULT_ZERO_TOL};
use crate::error::{Error, Result};

/// Parameters of a single solve.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SolverConfig {
    /// Fusion penalty weight.
    pub lambda1: f64,
    /// `l1` penalty weight.
    pub lambda2: f64,
    /// Target accuracy; sets `mu = epsilon / (2 (n - 1))`. When absent,
    /// `epsilon = 1e-2 * F_mu(0)`.
    pub epsilon: Option<f64>,
    /// Growth factor of the Lipschitz estimate during backtracking.
    pub gamma: f64,
    /// Initial Lipschitz estimate.
    pub l0: f64,
    pub max_iter: usize,
    /// Stop once the relative change of the smoothed objective is at most this.
    pub rel_tol: f64,
    /// Consecutive iterations that must pass the `rel_tol` test before stopping.
    pub patience: usize,
    /// Reset the momentum whenever the gradient step opposes it.
    pub restart: bool,
    pub init: Init,
}

/// Starting point `beta_0` of the accelerated method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Zero,
    /// The pooled lasso (the `lambda1 -> infinity` solution) copied to every time point.
    Pooled,
}

impl SolverConfig {
    pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-2;

    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            epsilon: None,
            gamma: 2.0,
            l0: 1.0,
            max_iter: 50_000,
            rel_tol: 1e-8,
            patience: 20,
            restart: true,
            init: Init::Pooled,
        }
    }

    pub fn with_lambdas(&self, lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 must be finite and >= 0, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda2 must be finite and >= 0, got {}", self.lambda2));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return bad(format!("epsilon must be positive, got {eps}"));
            }
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if !(self.l0 > 0.0 && self.l0.is_finite()) {
            return bad(format!("L0 must be positive, got {}", self.l0));
        }
        if self.max_iter == 0 {
            return bad("maxIter must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.rel_tol > 0.0) {
            return bad(format!("relTol must be positive, got {}", self.rel_tol));
        }
        Ok(())
    }
}

/// Least-squares data of one node: rows `x_{i,\a}` and responses `x_{i,a}`.
#[derive(Debug, Clone)]
pub struct NodeProblem {
    node: usize,
    /// `n x (p - 1)`, row-major.
    design: Vec<f64>,
    response: Vec<f64>,
    n: usize,
    m: usize,
}

impl NodeProblem {
    pub fn new(data: &TimeSeriesDataset, node: usize) -> Result<Self> {
        let (n, p) = (data.n(), data.p());
        if node >= p {
            return Err(Error::shape(format!("node < {p}"), format!("node {node}")));
        }
        let values = data.values();
        let mut design = Vec::with_capacity(n * (p - 1));
        let mut response = Vec::with_capacity(n);
        for row in values.rows() {
            for (b, &v) in row.iter().enumerate() {
                if b != node {
                    design.push(v);
                }
            }
            response.push(row[node]);
        }
        Ok(Self {
            node,
            design,
            response,
            n,
            m: p - 1,
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    /// Number of time points.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of regressors, `p - 1`.
    pub fn m(&self) -> usize {
        self.m
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.m..(i + 1) * self.m]
    }

    /// `sum_i x_{i,a}^2`, the loss at `beta = 0`.
    pub fn response_energy(&self) -> f64 {
        self.response.iter().map(|y| y * y).sum()
    }

    /// Loss of a `(p - 1) x n` coefficient matrix.
    pub fn loss(&self, beta: ArrayView2<'_, f64>) -> Result<f64> {
        check_shape(beta, self.m, self.n)?;
        Ok(self.loss_slice(col_major_slice(&to_col_major(beta))))
    }

    pub(crate) fn loss_slice(&self, beta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, col) in beta.chunks_exact(self.m).enumerate() {
            let r = self.response[i] - dot(self.row(i), col);
            total += r * r;
        }
        total
    }

    /// Writes the loss gradient into `grad` and returns the loss.
    pub(crate) fn loss_grad_slice(&self, beta: &[f64], grad: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (i, (col, g)) in beta
            .chunks_exact(self.m)
            .zip(grad.chunks_exact_mut(self.m))
            .enumerate()
        {
            let x = self.row(i);
            let r = self.response[i] - dot(x, col);
            total += r * r;
            let s = -2.0 * r;
            for (gk, xk) in g.iter_mut().zip(x) {
                *gk = s * xk;
            }
        }
        total
    }

    /// Per-column stationarity terms `x_i (<x_i, beta_i> - x_{i,a})`.
    fn residual_columns(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; beta.len()];
        for (i, (col, o)) in beta
            .chunks_exact(self.m)
            .zip(out.chunks_exact_mut(self.m))
            .enumerate()
        {
            let x = self.row(i);
            let r = dot(x, col) - self.response[i];
            for (ok, xk) in o.iter_mut().zip(x) {
                *ok = r * xk;
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

#[inline]
fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Writes `next - prev` into `d` and returns its squared norm.
#[inline]
fn diff_sq(prev: &[f64], next: &[f64], d: &mut [f64]) -> f64 {
    let len = d.len();
    let (prev, next) = (&prev[..len], &next[..len]);
    let mut acc = [0.0f64; 4];
    let mut k = 0;
    while k + 4 <= len {
        for l in 0..4 {
            let v = next[k + l] - prev[k + l];
            d[k + l] = v;
            acc[l] += v * v;
        }
        k += 4;
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while k < len {
        let v = next[k] - prev[k];
        d[k] = v;
        total += v * v;
        k += 1;
    }
    total
}

/// Column-major copy (or borrow-free clone) of a matrix.
pub(crate) fn to_col_major(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim().f());
    out.assign(&a);
    out
}

pub(crate) fn col_major_slice(a: &Array2<f64>) -> &[f64] {
    debug_assert!(a.t().is_standard_layout());
    a.as_slice_memory_order().expect("contiguous")
}

fn matrix_from_col_major(m: usize, n: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((m, n).f(), data).expect("length matches shape")
}

fn check_shape(beta: ArrayView2<'_, f64>, m: usize, n: usize) -> Result<()> {
    if beta.dim() != (m, n) {
        return Err(Error::shape(
            format!("{m}x{n}"),
            format!("{}x{}", beta.nrows(), beta.ncols()),
        ));
    }
    Ok(())
}

/// `sum_i (x_{i,a} - sum_{b != a} x_{i,b} beta_{b,i})^2`.
pub fn loss_value(data: &TimeSeriesDataset, node: usize, beta: ArrayView2<'_, f64>) -> Result<f64> {
    let problem = NodeProblem::new(data, node)?;
    check_shape(beta, problem.m, problem.n)?;
    Ok(problem.loss_slice(col_major_slice(&to_col_major(beta))))
}

/// Gradient of [`loss_value`]; column `i` is `-2 x_{i,\a} (x_{i,a} - <x_{i,\a}, beta_i>)`.
pub fn loss_gradient(
    data: &TimeSeriesDataset,
    node: usize,
    beta: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let problem = NodeProblem::new(data, node)?;
    check_shape(beta, problem.m, problem.n)?;
    let b = to_col_major(beta);
    let mut grad = vec![0.0; b.len()];
    problem.loss_grad_slice(col_major_slice(&b), &mut grad);
    Ok(matrix_from_col_major(problem.m, problem.n, grad))
}

/// Successive differences `beta H`: column `i` is `beta_{i+1} - beta_i`.
pub fn fused_apply(beta: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = beta.ncols();
    if n < 2 {
        return Err(Error::shape("at least 2 columns", format!("{n}")));
    }
    let mut out = Array2::zeros((beta.nrows(), n - 1).f());
    for i in 0..n - 1 {
        let d = &beta.column(i + 1) - &beta.column(i);
        out.column_mut(i).assign(&d);
    }
    Ok(out)
}

/// Projects every column onto the unit `l2` ball.
pub fn project_q(u: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = to_col_major(u);
    for mut col in out.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 1.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Unsmoothed fusion penalty `2 lambda1 sum_i ||beta_{i+1} - beta_i||_2`.
pub fn fused_penalty(beta: ArrayView2<'_, f64>, lambda1: f64) -> Result<f64> {
    let d = fused_apply(beta)?;
    Ok(2.0 * lambda1 * d.columns().into_iter().map(|c| c.dot(&c).sqrt()).sum::<f64>())
}

/// Value and gradient of the smoothed fusion penalty
/// `Psi_mu(beta) = max_{U in Q} <U, 2 lambda1 beta H> - mu ||U||_F^2`.
///
/// The maximizer is `U = project_q(lambda1 beta H / mu)` and the gradient is
/// `2 lambda1 U H'`.
pub fn smooth_penalty(
    beta: ArrayView2<'_, f64>,
    lambda1: f64,
    mu: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(mu > 0.0) {
        return Err(Error::NonPositiveMu(mu));
    }
    let (m, n) = beta.dim();
    if n < 2 {
        return Err(Error::shape("at least 2 columns", format!("{n}")));
    }
    let b = to_col_major(beta);
    let mut grad = vec![0.0; m * n];
    let mut scratch = vec![0.0; m];
    let value = smooth_penalty_slice(col_major_slice(&b), m, lambda1, mu, Some(&mut grad), &mut scratch);
    Ok((value, matrix_from_col_major(m, n, grad)))
}

/// Adds `grad Psi_mu` into `grad` when given and returns `Psi_mu`.
pub(crate) fn smooth_penalty_slice(
    beta: &[f64],
    m: usize,
    lambda1: f64,
    mu: f64,
    mut grad: Option<&mut [f64]>,
    d: &mut [f64],
) -> f64 {
    if lambda1 == 0.0 {
        return 0.0;
    }
    let n = beta.len() / m;
    let inv_mu = lambda1 / mu;
    let mut value = 0.0;
    for i in 0..n.saturating_sub(1) {
        let (prev, next) = (&beta[i * m..(i + 1) * m], &beta[(i + 1) * m..(i + 2) * m]);
        let dn2 = diff_sq(prev, next, d);
        if dn2 == 0.0 {
            continue;
        }
        let dn = dn2.sqrt();
        // u = s d with s = min(lambda1 / mu, 1 / ||d||)
        let s = if inv_mu * dn <= 1.0 { inv_mu } else { 1.0 / dn };
        value += 2.0 * lambda1 * s * dn2 - mu * s * s * dn2;
        if let Some(g) = grad.as_deref_mut() {
            let w = 2.0 * lambda1 * s;
            let (left, right) = g.split_at_mut((i + 1) * m);
            let gi = &mut left[i * m..];
            let gj = &mut right[..m];
            for ((a, b), dk) in gi.iter_mut().zip(gj.iter_mut()).zip(d.iter()) {
                *a -= w * dk;
                *b += w * dk;
            }
        }
    }
    value
}

/// `sgn(x) max(0, |x| - t)`.
#[inline]
pub fn soft_threshold_scalar(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Element-wise soft-thresholding.
pub fn soft_threshold(x: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
    x.mapv(|v| soft_threshold_scalar(v, t))
}

/// Minimizer of the quadratic model: `T(beta0 - grad / L, 2 lambda2 / L)`.
pub fn prox_step(
    beta0: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
    lipschitz: f64,
    lambda2: f64,
) -> Array2<f64> {
    let t = 2.0 * lambda2 / lipschitz;
    let mut out = Array2::zeros(beta0.dim().f());
    ndarray::Zip::from(&mut out)
        .and(beta0)
        .and(grad)
        .for_each(|o, &b, &g| *o = soft_threshold_scalar(b - g / lipschitz, t));
    out
}

/// Smooth part of a composite objective minimized by [`fista`].
pub(crate) trait SmoothPart {
    fn value(&self, x: &[f64], work: &mut Vec<f64>) -> f64;
    /// Overwrites `grad` with the gradient and returns the value.
    fn value_grad(&self, x: &[f64], grad: &mut [f64], work: &mut Vec<f64>) -> f64;
}

/// The smoothed objective `F_mu = L + Psi_mu + 2 lambda2 ||.||_1` of one node.
#[derive(Debug, Clone)]
pub struct SmoothedObjective<'a> {
    problem: &'a NodeProblem,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
}

impl<'a> SmoothedObjective<'a> {
    pub fn new(problem: &'a NodeProblem, lambda1: f64, lambda2: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::NonPositiveMu(mu));
        }
        Ok(Self {
            problem,
            lambda1,
            lambda2,
            mu,
        })
    }

    /// Uses `mu = epsilon / (2 (n - 1))` with `epsilon` resolved from `cfg`.
    pub fn from_config(problem: &'a NodeProblem, cfg: &SolverConfig) -> Result<Self> {
        let eps = resolve_epsilon(problem, cfg);
        Self::new(problem, cfg.lambda1, cfg.lambda2, smoothing_mu(eps, problem.n()))
    }

    fn checked(&self, beta: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_shape(beta, self.problem.m, self.problem.n)?;
        Ok(to_col_major(beta))
    }

    /// `L(beta) + Psi_mu(beta)`.
    pub fn smooth_value(&self, beta: ArrayView2<'_, f64>) -> Result<f64> {
        let b = self.checked(beta)?;
        Ok(SmoothPart::value(self, col_major_slice(&b), &mut Vec::new()))
    }

    /// Gradient of `L + Psi_mu`.
    pub fn smooth_gradient(&self, beta: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let b = self.checked(beta)?;
        let mut grad = vec![0.0; b.len()];
        self.value_grad(col_major_slice(&b), &mut grad, &mut Vec::new());
        Ok(matrix_from_col_major(self.problem.m, self.problem.n, grad))
    }

    /// `F_mu(beta)`.
    pub fn value(&self, beta: ArrayView2<'_, f64>) -> Result<f64> {
        Ok(self.smooth_value(beta)? + 2.0 * self.lambda2 * beta.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// Objective with the exact fusion penalty in place of `Psi_mu`.
    pub fn unsmoothed_value(&self, beta: ArrayView2<'_, f64>) -> Result<f64> {
        let b = self.checked(beta)?;
        let loss = self.problem.loss_slice(col_major_slice(&b));
        Ok(loss
            + fused_penalty(beta, self.lambda1)?
            + 2.0 * self.lambda2 * beta.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// `Q_L(beta, beta0)`: linearization of `L + Psi_mu` at `beta0` plus a
    /// proximal term and the exact `l1` penalty at `beta`.
    pub fn quadratic_model(
        &self,
        beta: ArrayView2<'_, f64>,
        beta0: ArrayView2<'_, f64>,
        lipschitz: f64,
    ) -> Result<f64> {
        let b = self.checked(beta)?;
        let b0 = self.checked(beta0)?;
        let mut grad = vec![0.0; b0.len()];
        let f0 = self.value_grad(col_major_slice(&b0), &mut grad, &mut Vec::new());
        let (x, x0) = (col_major_slice(&b), col_major_slice(&b0));
        let mut lin = 0.0;
        let mut dist = 0.0;
        for ((xk, x0k), gk) in x.iter().zip(x0).zip(&grad) {
            let d = xk - x0k;
            lin += d * gk;
            dist += d * d;
        }
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        Ok(f0 + lin + 0.5 * lipschitz * dist + 2.0 * self.lambda2 * l1)
    }
}

impl SmoothPart for SmoothedObjective<'_> {
    fn value(&self, x: &[f64], work: &mut Vec<f64>) -> f64 {
        work.resize(self.problem.m, 0.0);
        self.problem.loss_slice(x) + smooth_penalty_slice(x, self.problem.m, self.lambda1, self.mu, None, work)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64], work: &mut Vec<f64>) -> f64 {
        work.resize(self.problem.m, 0.0);
        let loss = self.problem.loss_grad_slice(x, grad);
        loss + smooth_penalty_slice(x, self.problem.m, self.lambda1, self.mu, Some(grad), work)
    }
}

/// `epsilon` from the configuration, or `1e-2 * F_mu(0)` when unset.
pub fn resolve_epsilon(problem: &NodeProblem, cfg: &SolverConfig) -> f64 {
    cfg.epsilon.unwrap_or_else(|| {
        let scale = problem.response_energy();
        let eps = SolverConfig::DEFAULT_RELATIVE_EPSILON * scale;
        if eps > 0.0 {
            eps
        } else {
            SolverConfig::DEFAULT_RELATIVE_EPSILON
        }
    })
}

/// `mu = epsilon / (2 (n - 1))`.
pub fn smoothing_mu(epsilon: f64, n: usize) -> f64 {
    epsilon / (2.0 * (n.max(2) - 1) as f64)
}

/// Iteration state of the accelerated method.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub beta: Vec<f64>,
    pub z: Vec<f64>,
    pub alpha: f64,
    pub lipschitz: f64,
    pub objective: f64,
    pub iter: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FistaSettings {
    pub l1_weight: f64,
    pub gamma: f64,
    pub l0: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub patience: usize,
    pub restart: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct FistaOutcome {
    pub state: SolverState,
    pub converged: bool,
}

/// Accelerated proximal gradient with backtracking on the Lipschitz estimate.
///
/// Minimizes `smooth(x) + l1_weight ||x||_1`. Returns `None` when the
/// Lipschitz estimate or the objective stops being finite.
pub(crate) fn fista(smooth: &impl SmoothPart, x0: Vec<f64>, s: &FistaSettings) -> Option<FistaOutcome> {
    let len = x0.len();
    let mut work = Vec::new();

    let mut state = SolverState {
        objective: smooth.value(&x0, &mut work) + s.l1_weight * l1_norm(&x0),
        z: x0.clone(),
        beta: x0,
        alpha: 1.0,
        lipschitz: s.l0,
        iter: 0,
    };
    let mut beta_prev = state.beta.clone();
    let mut grad = vec![0.0; len];
    let mut cand = vec![0.0; len];
    let mut calm = 0;

    for k in 1..=s.max_iter {
        state.iter = k;
        let fz = smooth.value_grad(&state.z, &mut grad, &mut work);
        let mut lip = state.lipschitz;
        let (f_cand, l1_cand) = loop {
            let step = 1.0 / lip;
            let t = s.l1_weight * step;
            let (lin, dist, l1) = prox_pass(&state.z, &grad, step, t, &mut cand);
            let f = smooth.value(&cand, &mut work);
            let q = fz + lin + 0.5 * lip * dist;
            if f <= q + 1e-12 * q.abs().max(1.0) {
                debug_assert!(f <= q + 1e-12 * q.abs().max(1.0));
                break (f, l1);
            }
            lip *= s.gamma;
            if !lip.is_finite() {
                return None;
            }
        };
        state.lipschitz = lip;

        std::mem::swap(&mut beta_prev, &mut state.beta);
        std::mem::swap(&mut state.beta, &mut cand);
        let objective = f_cand + s.l1_weight * l1_cand;
        if !objective.is_finite() {
            return None;
        }

        if s.restart {
            // gradient-mapping restart: drop momentum when the step opposes it
            let opposes: f64 = state
                .z
                .iter()
                .zip(&state.beta)
                .zip(&beta_prev)
                .map(|((z, b), bp)| (z - b) * (b - bp))
                .sum();
            if opposes > 0.0 {
                state.alpha = 1.0;
            }
        }
        let alpha_next = 0.5 * (1.0 + (1.0 + 4.0 * state.alpha * state.alpha).sqrt());
        let momentum = (state.alpha - 1.0) / alpha_next;
        for ((z, &b), &bp) in state.z.iter_mut().zip(&state.beta).zip(&beta_prev) {
            *z = b + momentum * (b - bp);
        }
        state.alpha = alpha_next;

        let prev = state.objective;
        state.objective = objective;
        let change = (prev - objective).abs();
        if change <= s.rel_tol * prev.abs() || (prev == 0.0 && objective == 0.0) {
            calm += 1;
        } else {
            calm = 0;
        }
        if calm >= s.patience {
            return Some(FistaOutcome {
                state,
                converged: true,
            });
        }
    }
    Some(FistaOutcome {
        state,
        converged: false,
    })
}

/// `cand = T(z - step grad, t)`; returns `<cand - z, grad>`, `||cand - z||^2`
/// and `||cand||_1`.
fn prox_pass(z: &[f64], grad: &[f64], step: f64, t: f64, cand: &mut [f64]) -> (f64, f64, f64) {
    let len = cand.len();
    let (z, grad) = (&z[..len], &grad[..len]);
    let mut lin = [0.0f64; 4];
    let mut dist = [0.0f64; 4];
    let mut l1 = [0.0f64; 4];
    let mut k = 0;
    let mut lane = |k: usize, l: usize| {
        let (zk, gk) = (z[k], grad[k]);
        let u = zk - gk * step;
        let v = u.signum() * (u.abs() - t).max(0.0);
        cand[k] = v;
        let d = v - zk;
        lin[l] += d * gk;
        dist[l] += d * d;
        l1[l] += v.abs();
    };
    while k + 4 <= len {
        for l in 0..4 {
            lane(k + l, l);
        }
        k += 4;
    }
    while k < len {
        lane(k, 0);
        k += 1;
    }
    let sum = |a: [f64; 4]| (a[0] + a[1]) + (a[2] + a[3]);
    (sum(lin), sum(dist), sum(l1))
}

fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Outcome of [`solve`].
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub path: CoefficientPath,
    /// Smoothed objective `F_mu` at the returned path.
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lipschitz: f64,
    pub mu: f64,
    pub lambda1: f64,
    pub kkt_residual: Option<f64>,
}

impl SolveResult {
    /// Resolution `mu / lambda1` of the smoothed fusion penalty: successive
    /// differences below it sit in the quadratic region of `Psi_mu`, where
    /// the penalty never fuses them exactly.
    pub fn smoothing_resolution(&self) -> f64 {
        if self.lambda1 > 0.0 {
            self.mu / self.lambda1
        } else {
            0.0
        }
    }

    /// Change-point threshold: `max(1e-4 max_i ||beta_i||, 2 mu / lambda1)`.
    pub fn fuse_tol(&self) -> f64 {
        default_fuse_tol(&self.path).max(2.0 * self.smoothing_resolution())
    }

    /// Zero threshold for block coefficients: `max(1e-6, mu / lambda1)`.
    pub fn zero_tol(&self) -> f64 {
        DEFAULT_ZERO_TOL.max(self.smoothing_resolution())
    }

    /// Computes and stores the KKT residual at [`Self::fuse_tol`] and [`Self::zero_tol`].
    pub fn with_kkt(mut self, data: &TimeSeriesDataset, cfg: &SolverConfig) -> Result<Self> {
        self.kkt_residual = Some(kkt_residual(
            data,
            self.path.node(),
            self.path.coeffs(),
            cfg.lambda1,
            cfg.lambda2,
            self.fuse_tol(),
            self.zero_tol(),
        )?);
        Ok(self)
    }
}

/// Minimizes the smoothed objective of `node` from the starting point selected by `cfg.init`.
pub fn solve(data: &TimeSeriesDataset, node: usize, cfg: &SolverConfig) -> Result<SolveResult> {
    solve_problem(&NodeProblem::new(data, node)?, cfg, None)
}

/// Like [`solve`] but starting from `init`.
pub fn solve_from(
    data: &TimeSeriesDataset,
    node: usize,
    cfg: &SolverConfig,
    init: ArrayView2<'_, f64>,
) -> Result<SolveResult> {
    solve_problem(&NodeProblem::new(data, node)?, cfg, Some(init))
}

pub fn solve_problem(
    problem: &NodeProblem,
    cfg: &SolverConfig,
    init: Option<ArrayView2<'_, f64>>,
) -> Result<SolveResult> {
    cfg.validate()?;
    let (m, n) = (problem.m, problem.n);
    let objective = SmoothedObjective::from_config(problem, cfg)?;
    let x0 = match (init, cfg.init) {
        (Some(b), _) => {
            check_shape(b, m, n)?;
            to_col_major(b).into_raw_vec_and_offset().0
        }
        (None, Init::Zero) => vec![0.0; m * n],
        (None, Init::Pooled) => {
            let pooled = static_lasso(problem, 0..n, 2.0 * cfg.lambda2, cfg)?;
            pooled.theta.repeat(n)
        }
    };
    let settings = FistaSettings {
        l1_weight: 2.0 * cfg.lambda2,
        gamma: cfg.gamma,
        l0: cfg.l0,
        max_iter: cfg.max_iter,
        rel_tol: cfg.rel_tol,
        patience: cfg.patience,
        restart: cfg.restart,
    };
    let outcome = fista(&objective, x0, &settings).ok_or(Error::NumericalOverflow {
        node: problem.node,
        lipschitz: f64::INFINITY,
    })?;
    let coeffs = matrix_from_col_major(m, n, outcome.state.beta);
    Ok(SolveResult {
        path: CoefficientPath::new(problem.node, coeffs)?,
        final_objective: outcome.state.objective,
        iterations: outcome.state.iter,
        converged: outcome.converged,
        lipschitz: outcome.state.lipschitz,
        mu: objective.mu,
        lambda1: cfg.lambda1,
        kkt_residual: None,
    })
}

/// Lasso `(1/r) ||y - X theta||^2 + lambda ||theta||_1` over a range of `r`
/// rows of a node problem, held as Gram matrix and cross products.
#[derive(Debug, Clone)]
struct GramLasso {
    gram: Vec<f64>,
    cross: Vec<f64>,
    energy: f64,
    scale: f64,
    m: usize,
}

impl GramLasso {
    fn new(problem: &NodeProblem, rows: Range<usize>) -> Self {
        let m = problem.m;
        let mut gram = vec![0.0; m * m];
        let mut cross = vec![0.0; m];
        let mut energy = 0.0;
        let count = rows.len();
        for i in rows {
            let x = problem.row(i);
            let y = problem.response[i];
            energy += y * y;
            for (j, &xj) in x.iter().enumerate() {
                cross[j] += xj * y;
                let g = &mut gram[j * m..(j + 1) * m];
                for (gk, &xk) in g.iter_mut().zip(x) {
                    *gk += xj * xk;
                }
            }
        }
        Self {
            gram,
            cross,
            energy,
            scale: 1.0 / count as f64,
            m,
        }
    }
}

impl SmoothPart for GramLasso {
    fn value(&self, x: &[f64], _work: &mut Vec<f64>) -> f64 {
        let mut quad = 0.0;
        for j in 0..self.m {
            quad += x[j] * dot(&self.gram[j * self.m..(j + 1) * self.m], x);
        }
        self.scale * (self.energy - 2.0 * dot(&self.cross, x) + quad).max(0.0)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64], _work: &mut Vec<f64>) -> f64 {
        let mut quad = 0.0;
        for j in 0..self.m {
            let gx = dot(&self.gram[j * self.m..(j + 1) * self.m], x);
            quad += x[j] * gx;
            grad[j] = 2.0 * self.scale * (gx - self.cross[j]);
        }
        self.scale * (self.energy - 2.0 * dot(&self.cross, x) + quad).max(0.0)
    }
}

/// Solution of a static lasso over a range of rows.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub theta: Vec<f64>,
    /// Residual sum of squares over the rows, computed from the data directly.
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Static lasso
/// `(1/r) sum_{i in rows} (x_{i,a} - <x_{i,\a}, theta>)^2 + lambda ||theta||_1`
/// over a fixed range of `r` rows, solved with the same accelerated proximal
/// iteration, backtracking and stopping rule as [`solve`].
#[derive(Debug, Clone)]
pub struct StaticLasso<'a> {
    problem: &'a NodeProblem,
    rows: Range<usize>,
    smooth: GramLasso,
}

impl<'a> StaticLasso<'a> {
    pub fn new(problem: &'a NodeProblem, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > problem.n {
            return Err(Error::shape(
                format!("non-empty rows within 0..{}", problem.n),
                format!("{rows:?}"),
            ));
        }
        Ok(Self {
            problem,
            smooth: GramLasso::new(problem, rows.clone()),
            rows,
        })
    }

    /// Smallest `lambda` whose solution is zero: `max_b |2 sum_i x_{i,b} x_{i,a}| / r`.
    pub fn critical_lambda(&self) -> f64 {
        self.smooth
            .cross
            .iter()
            .map(|c| (2.0 * c * self.smooth.scale).abs())
            .fold(0.0, f64::max)
    }

    /// Solves at `lambda`, starting from `init` or zero.
    pub fn solve(&self, lambda: f64, cfg: &SolverConfig, init: Option<&[f64]>) -> Result<LassoFit> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lasso penalty must be >= 0, got {lambda}")));
        }
        let x0 = match init {
            Some(x) if x.len() == self.problem.m => x.to_vec(),
            Some(x) => return Err(Error::shape(format!("{}", self.problem.m), format!("{}", x.len()))),
            None => vec![0.0; self.problem.m],
        };
        let settings = FistaSettings {
            l1_weight: lambda,
            gamma: cfg.gamma,
            l0: cfg.l0,
            max_iter: cfg.max_iter,
            rel_tol: cfg.rel_tol,
            patience: cfg.patience,
            restart: cfg.restart,
        };
        let outcome = fista(&self.smooth, x0, &settings).ok_or(Error::NumericalOverflow {
            node: self.problem.node,
            lipschitz: f64::INFINITY,
        })?;
        let theta = outcome.state.beta;
        let rss = self
            .rows
            .clone()
            .map(|i| {
                let r = self.problem.response[i] - dot(self.problem.row(i), &theta);
                r * r
            })
            .sum();
        Ok(LassoFit {
            theta,
            rss,
            iterations: outcome.state.iter,
            converged: outcome.converged,
        })
    }
}

/// One-off [`StaticLasso`] solve from zero.
pub fn static_lasso(
    problem: &NodeProblem,
    rows: Range<usize>,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<LassoFit> {
    StaticLasso::new(problem, rows)?.solve(lambda, cfg, None)
}

/// Largest violation of the optimality conditions of the unsmoothed problem.
///
/// For every `k` the suffix sum
/// `r_k = sum_{i>=k} x_i (<x_i, beta_i> - x_{i,a}) + lambda2 sum_{i>=k} y_i`
/// must equal `-lambda1 z_k`, where `z_k` is the unit jump direction when
/// `||beta_k - beta_{k-1}|| > fuse_tol` and otherwise any vector of the unit
/// ball (`z_1 = 0`). Entries with `|beta| <= zero_tol` take a free
/// subgradient `y` in `[-1, 1]`, shared by all `k`.
///
/// The free subgradients are found by minimizing the squared violation over
/// `z` with projected accelerated gradient steps; the residual of the best
/// iterate is returned, so the value is an upper bound on the smallest
/// achievable violation.
pub fn kkt_residual(
    data: &TimeSeriesDataset,
    node: usize,
    beta: ArrayView2<'_, f64>,
    lambda1: f64,
    lambda2: f64,
    fuse_tol: f64,
    zero_tol: f64,
) -> Result<f64> {
    let problem = NodeProblem::new(data, node)?;
    let (m, n) = (problem.m, problem.n);
    check_shape(beta, m, n)?;
    let b = to_col_major(beta);
    let x = col_major_slice(&b);

    let mut c = problem.residual_columns(x);
    let free: Vec<bool> = x.iter().map(|v| v.abs() <= zero_tol).collect();
    for ((ck, &xk), &f) in c.iter_mut().zip(x).zip(&free) {
        if !f {
            *ck += lambda2 * xk.signum();
        }
    }
    // dirs[k] for k in 1..n: unit jump from column k - 1 to k if it counts as a change point
    let mut dirs: Vec<Option<Vec<f64>>> = vec![None; n];
    for k in 1..n {
        let jump: Vec<f64> = (0..m).map(|j| x[k * m + j] - x[(k - 1) * m + j]).collect();
        let norm = sq_norm(&jump).sqrt();
        if norm > fuse_tol {
            dirs[k] = Some(jump.iter().map(|v| v / norm).collect());
        }
    }
    let check = KktCheck {
        m,
        n,
        lambda1,
        lambda2,
        c,
        free,
        dirs,
    };

    // z[k] for k in 0..=n, z[0] = z[n] = 0 (1-based z_1 and z_{n+1})
    let mut z = vec![0.0; (n + 1) * m];
    for k in 1..n {
        if let Some(d) = &check.dirs[k] {
            z[k * m..(k + 1) * m].copy_from_slice(d);
        }
    }
    let mut best = check.violation(&z);
    if lambda1 == 0.0 || best == 0.0 {
        return Ok(best);
    }
    let step = 1.0 / (8.0 * lambda1 * lambda1);
    let mut prev = z.clone();
    let mut point = z.clone();
    let mut grad = vec![0.0; z.len()];
    let mut alpha: f64 = 1.0;
    let mut last_progress = 0;
    for iter in 1..=KKT_MAX_ITER {
        check.gradient(&point, &mut grad);
        for (zk, (pk, gk)) in z.iter_mut().zip(point.iter().zip(&grad)) {
            *zk = pk - step * gk;
        }
        check.project(&mut z);
        let next_alpha = 0.5 * (1.0 + (1.0 + 4.0 * alpha * alpha).sqrt());
        let w = (alpha - 1.0) / next_alpha;
        for ((pk, zk), qk) in point.iter_mut().zip(&z).zip(&prev) {
            *pk = zk + w * (zk - qk);
        }
        check.project(&mut point);
        prev.copy_from_slice(&z);
        alpha = next_alpha;
        if iter % 50 == 0 {
            let v = check.violation(&z);
            if v < KKT_PROGRESS * best {
                last_progress = iter;
            }
            best = best.min(v);
            if best <= KKT_EXACT || iter - last_progress >= KKT_STALL {
                break;
            }
        }
    }
    Ok(best)
}

const KKT_MAX_ITER: usize = 200_000;
const KKT_EXACT: f64 = 1e-12;
const KKT_PROGRESS: f64 = 0.99;
const KKT_STALL: usize = 5_000;

struct KktCheck {
    m: usize,
    n: usize,
    lambda1: f64,
    lambda2: f64,
    /// Loss gradient (halved) plus `lambda2 sgn(beta)` on fixed entries.
    c: Vec<f64>,
    free: Vec<bool>,
    dirs: Vec<Option<Vec<f64>>>,
}

impl KktCheck {
    /// `c_i + lambda1 (z_i - z_{i+1})` at entry `idx = i m + j`.
    fn stationarity(&self, z: &[f64], idx: usize) -> f64 {
        self.c[idx] + self.lambda1 * (z[idx] - z[idx + self.m])
    }

    /// Part of the stationarity value no subgradient `y` can absorb.
    fn excess(&self, z: &[f64], idx: usize) -> f64 {
        let s = self.stationarity(z, idx);
        if self.free[idx] {
            soft_threshold_scalar(s, self.lambda2)
        } else {
            s
        }
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
        for idx in 0..self.m * self.n {
            let e = self.excess(z, idx);
            grad[idx] += self.lambda1 * e;
            grad[idx + self.m] -= self.lambda1 * e;
        }
    }

    fn project(&self, z: &mut [f64]) {
        let m = self.m;
        z[..m].fill(0.0);
        z[self.n * m..].fill(0.0);
        for k in 1..self.n {
            let zk = &mut z[k * m..(k + 1) * m];
            match &self.dirs[k] {
                Some(d) => zk.copy_from_slice(d),
                None => {
                    let norm = sq_norm(zk).sqrt();
                    if norm > 1.0 {
                        zk.iter_mut().for_each(|v| *v /= norm);
                    }
                }
            }
        }
    }

    /// Completes `y` from `z` by clipping and returns the largest violation
    /// of the suffix conditions.
    fn violation(&self, z: &[f64]) -> f64 {
        let m = self.m;
        let mut r = vec![0.0; m];
        let mut worst: f64 = 0.0;
        for k in (0..self.n).rev() {
            for j in 0..m {
                let idx = k * m + j;
                r[j] += self.c[idx];
                if self.free[idx] {
                    let s = self.stationarity(z, idx);
                    r[j] -= s - soft_threshold_scalar(s, self.lambda2);
                }
            }
            let violation = match (k, &self.dirs[k]) {
                (0, _) => sq_norm(&r).sqrt(),
                (_, Some(d)) => {
                    let v: Vec<f64> = r.iter().zip(d).map(|(rj, dj)| rj + self.lambda1 * dj).collect();
                    sq_norm(&v).sqrt()
                }
                (_, None) => (sq_norm(&r).sqrt() - self.lambda1).max(0.0),
            };
            worst = worst.max(violation);
        }
        worst
    }
}
