use std::io::Write;
use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tdlasso::metrics::{run_benchmark, BenchmarkConfig, EvalReport};
use tdlasso::selection::{geometric_lambda1, geometric_lambda2, PenaltyGrid};
use tdlasso::solver::{
    fused_penalty, kkt_residual, prox_step, resolve_epsilon, smooth_penalty, solve, NodeProblem,
    SmoothedObjective, SolverConfig,
};
use tdlasso::synthetic::{min_eigenvalue, sample_scenario, support_edges, ScenarioKind, ScenarioSpec};
use tdlasso::TimeSeriesDataset;

fn report(criterion: u32, pass: bool, detail: &str) {
    // written past the test harness capture so every line shows up
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion:>2}: {verdict}  {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> TimeSeriesDataset {
    TimeSeriesDataset::new(gaussian_matrix(rng, n, p, 1.0)).unwrap()
}

fn tiny_chain(seed: u64) -> TimeSeriesDataset {
    let spec = ScenarioSpec {
        kind: ScenarioKind::Chain,
        p: 4,
        block_sizes: vec![10, 10],
        seed,
    };
    sample_scenario(&spec).unwrap().0.standardize().unwrap()
}

fn benchmark(kind: ScenarioKind) -> &'static EvalReport {
    static CHAIN: OnceLock<EvalReport> = OnceLock::new();
    static NN: OnceLock<EvalReport> = OnceLock::new();
    let cell = match kind {
        ScenarioKind::Chain => &CHAIN,
        ScenarioKind::Nn => &NN,
    };
    // seeds 1..=10
    cell.get_or_init(|| run_benchmark(&BenchmarkConfig::standard(kind, 10, 0)).unwrap())
}

fn f1_criterion(criterion: u32, kind: ScenarioKind, tdlasso: (f64, f64), oracle: (f64, f64)) {
    let r = benchmark(kind);
    let td = r.tdlasso.as_ref().map_or(f64::NAN, |s| s.f1.mean);
    let or = r.oracle.as_ref().map_or(f64::NAN, |s| s.f1.mean);
    let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    let detail = format!(
        "{kind}: TD-Lasso F1 {td:.3} (target [{}, {}]), oracle F1 {or:.3} (target [{}, {}]), {} failed runs",
        tdlasso.0, tdlasso.1, oracle.0, oracle.1, r.failures
    );
    report(criterion, r.failures == 0 && inside(td, tdlasso) && inside(or, oracle), &detail);
}

#[test]
#[ignore = "10-run benchmark at full scale, about 70 minutes on one core"]
fn criterion_01_chain_f1() {
    f1_criterion(1, ScenarioKind::Chain, (0.72, 0.92), (0.88, 0.98));
}

#[test]
#[ignore = "10-run benchmark at full scale, about 70 minutes on one core"]
fn criterion_02_nn_f1() {
    f1_criterion(2, ScenarioKind::Nn, (0.67, 0.87), (0.77, 0.91));
}

#[test]
#[ignore = "10-run benchmark at full scale, about 70 minutes on one core"]
fn criterion_03_boundary_recovery() {
    let r = benchmark(ScenarioKind::Chain);
    let pairs: Vec<_> = r.run_records.iter().flat_map(|rec| &rec.boundaries).collect();
    let matched: Vec<_> = pairs.iter().filter_map(|b| b.abs_errors.as_ref()).collect();
    let close = matched.iter().filter(|e| e.iter().all(|&d| d <= 20)).count();
    let within = pairs.iter().filter(|b| b.hausdorff <= 20.0).count();
    let frac = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    let detail = format!(
        "max |T_j - T*_j| <= 20 in {close}/{} pairs with 3 blocks ({:.0}%), h <= 20 in {within}/{} pairs ({:.0}%), target 70% each",
        matched.len(),
        100.0 * frac(close, matched.len()),
        pairs.len(),
        100.0 * frac(within, pairs.len())
    );
    report(3, frac(close, matched.len()) >= 0.7 && frac(within, pairs.len()) >= 0.7, &detail);
}

#[test]
fn criterion_04_kkt_oracle() {
    let mut worst_fit: f64 = 0.0;
    let mut weakest_perturbed = f64::INFINITY;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + inst);
        let data = tiny_chain(inst + 1);
        let node = (inst % 4) as usize;
        let lambda1 = geometric_lambda1(rng.gen_range(0..=90));
        let lambda2 = geometric_lambda2(rng.gen_range(60..=195));
        let cfg = SolverConfig {
            epsilon: Some(1e-5),
            rel_tol: 1e-10,
            max_iter: 5_000_000,
            ..SolverConfig::new(lambda1, lambda2)
        };
        let fit = solve(&data, node, &cfg).unwrap();
        let (fuse_tol, zero_tol) = (fit.fuse_tol(), fit.zero_tol());
        let beta = fit.path.coeffs().to_owned();
        let r = kkt_residual(&data, node, beta.view(), lambda1, lambda2, fuse_tol, zero_tol).unwrap();
        worst_fit = worst_fit.max(r);
        for idx in 0..beta.len() {
            let mut bad = beta.clone();
            let (row, col) = (idx % bad.nrows(), idx / bad.nrows());
            bad[[row, col]] += 0.5;
            let rp = kkt_residual(&data, node, bad.view(), lambda1, lambda2, fuse_tol, zero_tol).unwrap();
            weakest_perturbed = weakest_perturbed.min(rp);
        }
    }
    let detail = format!(
        "largest residual of 20 solves {worst_fit:.2e} (<= 1e-3), smallest after a +0.5 perturbation {weakest_perturbed:.2e} (> 1e-2)"
    );
    report(4, worst_fit <= 1e-3 && weakest_perturbed > 1e-2, &detail);
}

#[test]
fn criterion_05_gradient_finite_differences() {
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + inst);
        let n = rng.gen_range(3..=15);
        let p = rng.gen_range(2..=6);
        let data = random_dataset(&mut rng, n, p);
        let node = rng.gen_range(0..p);
        let problem = NodeProblem::new(&data, node).unwrap();
        let obj = SmoothedObjective::new(&problem, rng.gen_range(0.1..5.0), 0.0, rng.gen_range(0.01..1.0)).unwrap();
        let beta = gaussian_matrix(&mut rng, p - 1, n, 0.5);
        let grad = obj.smooth_gradient(beta.view()).unwrap();
        let h = 1e-6;
        let mut num = Array2::<f64>::zeros(beta.dim());
        for idx in ndarray::indices(beta.dim()) {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[idx] += h;
            down[idx] -= h;
            num[idx] = (obj.smooth_value(up.view()).unwrap() - obj.smooth_value(down.view()).unwrap()) / (2.0 * h);
        }
        let err = (&grad - &num).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        worst = worst.max(err / scale);
    }
    report(5, worst <= 1e-5, &format!("largest relative error {worst:.2e} over 20 instances (<= 1e-5)"));
}

#[test]
fn criterion_06_smoothing_sandwich() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut worst_slack = f64::INFINITY;
    let mut cases = 0;
    for mu in [1e-1, 1e-3, 1e-5] {
        for _ in 0..200 {
            let n = rng.gen_range(2..=20);
            let m = rng.gen_range(1..=6);
            let lambda1 = rng.gen_range(0.1..40.0);
            let scale = 10f64.powf(rng.gen_range(-6.0..1.0));
            let beta = gaussian_matrix(&mut rng, m, n, scale);
            let smooth = smooth_penalty(beta.view(), lambda1, mu).unwrap().0;
            let exact = fused_penalty(beta.view(), lambda1).unwrap();
            let slack = (exact - smooth).min(smooth + mu * (n - 1) as f64 - exact);
            worst_slack = worst_slack.min(slack);
            cases += 1;
        }
    }
    report(6, worst_slack >= -1e-9, &format!("smallest slack {worst_slack:.2e} over {cases} cases (>= -1e-9)"));
}

#[test]
fn criterion_07_prox_optimality() {
    let mut worst: f64 = f64::INFINITY;
    for state in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + state);
        let n = rng.gen_range(2..=12);
        let p = rng.gen_range(2..=6);
        let data = random_dataset(&mut rng, n, p);
        let problem = NodeProblem::new(&data, rng.gen_range(0..p)).unwrap();
        let obj = SmoothedObjective::new(&problem, rng.gen_range(0.1..5.0), rng.gen_range(0.01..2.0), 0.05).unwrap();
        let lipschitz = 10f64.powf(rng.gen_range(0.0..3.0));
        let z = gaussian_matrix(&mut rng, p - 1, n, 0.5);
        let grad = obj.smooth_gradient(z.view()).unwrap();
        let prox = prox_step(z.view(), grad.view(), lipschitz, obj.lambda2);
        let at_prox = obj.quadratic_model(prox.view(), z.view(), lipschitz).unwrap();
        for _ in 0..100 {
            let dir = gaussian_matrix(&mut rng, p - 1, n, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let v = &prox + &(dir * (1e-3 / norm));
            let at_v = obj.quadratic_model(v.view(), z.view(), lipschitz).unwrap();
            worst = worst.min((at_v - at_prox) / at_prox.abs().max(1.0));
        }
    }
    report(7, worst >= -1e-12, &format!("smallest Q_L(v) - Q_L(prox) {worst:.2e} (relative) over 2000 probes"));
}

/// Lasso on the pooled rows by cyclic coordinate descent:
/// `sum_i (y_i - <x_i, theta>)^2 + 2 lambda2 n ||theta||_1`.
fn pooled_lasso_objective(data: &TimeSeriesDataset, node: usize, lambda2: f64) -> f64 {
    let x = data.values();
    let n = data.n();
    let others: Vec<usize> = (0..data.p()).filter(|&b| b != node).collect();
    let y = x.column(node);
    let mut theta = vec![0.0; others.len()];
    let mut resid: Vec<f64> = y.to_vec();
    let threshold = lambda2 * n as f64;
    for _ in 0..100_000 {
        let mut change: f64 = 0.0;
        for (k, &b) in others.iter().enumerate() {
            let col = x.column(b);
            let norm2: f64 = col.iter().map(|v| v * v).sum();
            let rho: f64 = col.iter().zip(&resid).map(|(c, r)| c * r).sum::<f64>() + norm2 * theta[k];
            let shrunk = if rho > threshold {
                (rho - threshold) / norm2
            } else if rho < -threshold {
                (rho + threshold) / norm2
            } else {
                0.0
            };
            let delta = shrunk - theta[k];
            if delta != 0.0 {
                for (r, c) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * c;
                }
                theta[k] = shrunk;
            }
            change = change.max(delta.abs());
        }
        if change < 1e-14 {
            break;
        }
    }
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    rss + 2.0 * lambda2 * n as f64 * theta.iter().map(|t| t.abs()).sum::<f64>()
}

#[test]
fn criterion_08_degenerate_penalties() {
    let mut worst_gap: f64 = 0.0;
    let mut worst_spread: f64 = 0.0;
    let mut all_zero = true;
    for seed in 1..=5u64 {
        let spec = ScenarioSpec {
            kind: ScenarioKind::Chain,
            p: 6,
            block_sizes: vec![40, 40],
            seed,
        };
        let data = sample_scenario(&spec).unwrap().0.standardize().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        for node in 0..data.p() {
            let lambda2 = geometric_lambda2(rng.gen_range(60..=195));
            let cfg = SolverConfig::new(1e6, lambda2);
            let fit = solve(&data, node, &cfg).unwrap();
            let problem = NodeProblem::new(&data, node).unwrap();
            let eps = resolve_epsilon(&problem, &cfg);
            let obj = SmoothedObjective::from_config(&problem, &cfg).unwrap();
            let ours = obj.unsmoothed_value(fit.path.coeffs()).unwrap();
            let pooled = pooled_lasso_objective(&data, node, lambda2);
            worst_gap = worst_gap.max((ours - pooled).abs() / eps);
            let coeffs = fit.path.coeffs();
            for col in coeffs.columns() {
                let d = &col - &coeffs.column(0);
                worst_spread = worst_spread.max(d.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }

            // at beta = 0 every column's loss gradient is absorbed by the l1 subgradient
            let x = data.values();
            let critical = (0..data.n())
                .flat_map(|i| (0..data.p()).filter(move |&b| b != node).map(move |b| (i, b)))
                .map(|(i, b)| (x[[i, b]] * x[[i, node]]).abs())
                .fold(0.0f64, f64::max);
            let lambda1 = geometric_lambda1(rng.gen_range(0..=90));
            let zero = solve(&data, node, &SolverConfig::new(lambda1, critical)).unwrap();
            all_zero &= zero.path.coeffs().iter().all(|&v| v == 0.0);
        }
    }
    let detail = format!(
        "lambda1 = 1e6: |F - F_pooled| <= {worst_gap:.2e} eps, column spread {worst_spread:.1e} (<= 1e-6); lambda2 >= critical gives exact zeros: {all_zero}"
    );
    report(8, worst_gap <= 1.0 && worst_spread <= 1e-6 && all_zero, &detail);
}

#[test]
fn criterion_09_generator_validity() {
    let mut worst_diag: f64 = 0.0;
    let mut worst_inverse: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut max_degree = 0;
    for kind in [ScenarioKind::Chain, ScenarioKind::Nn] {
        for seed in 1..=100u64 {
            let (_, truth) = sample_scenario(&ScenarioSpec::standard(kind, seed)).unwrap();
            for (cov, prec) in truth.covariances.iter().zip(&truth.precisions) {
                let p = cov.nrows();
                min_eig = min_eig.min(min_eigenvalue(cov));
                worst_diag = worst_diag.max(cov.diag().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs())));
                let resid = prec.dot(cov) - Array2::<f64>::eye(p);
                worst_inverse = worst_inverse.max(resid.iter().map(|v| v * v).sum::<f64>().sqrt());
                if kind == ScenarioKind::Nn {
                    let mut degree = vec![0; p];
                    for &(a, b) in &support_edges(prec) {
                        degree[a] += 1;
                        degree[b] += 1;
                    }
                    max_degree = max_degree.max(degree.into_iter().max().unwrap_or(0));
                }
            }
        }
    }
    let detail = format!(
        "200 scenarios: min eigenvalue {min_eig:.3e} (> 0), diagonal error {worst_diag:.1e} (<= 1e-10), ||Omega Sigma - I||_F {worst_inverse:.1e} (<= 1e-8), nn max degree {max_degree} (<= 4)"
    );
    report(9, min_eig > 0.0 && worst_diag <= 1e-10 && worst_inverse <= 1e-8 && max_degree <= 4, &detail);
}

#[test]
fn criterion_10_determinism() {
    let cfg = BenchmarkConfig {
        p: 8,
        block_sizes: vec![20, 20],
        grid: PenaltyGrid::geometric(&[0, 45, 90], &[60, 120, 180]).unwrap(),
        ..BenchmarkConfig::standard(ScenarioKind::Nn, 3, 10)
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let report = pool.install(|| run_benchmark(&cfg)).unwrap();
        serde_json::to_string(&report).unwrap()
    };
    let first = run(1);
    let second = run(1);
    let eight = run(8);
    let detail = format!(
        "reduced benchmark (nn, p 8, 3 runs, 3x3 grid): repeat identical {}, 8 threads identical {}",
        first == second,
        first == eight
    );
    report(10, first == second && first == eight, &detail);
}
