use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tdlasso::report::{BenchmarkDocument, EstimateConfig, EstimateDocument, GridDocument, TruthDocument};
use tdlasso::selection::{grid_search, matrix_csv, GridOptions};
use tdlasso::solver::{kkt_residual, Init};
use tdlasso::synthetic::{sample_scenario, ScenarioKind, ScenarioSpec};
use tdlasso::{
    estimate_graph, load_dataset, run_benchmark, BenchmarkConfig, Error, PenaltyGrid, SolverConfig, Thresholds,
    TimeSeriesDataset,
};

#[derive(Parser)]
#[command(name = "tdlasso", version, about = "Time-varying graph estimation by temporally fused neighborhood regression")]
struct Cli {
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a piecewise-constant scenario.
    Simulate(SimulateArgs),
    /// Estimate the graph sequence at one penalty pair or by BIC over a grid.
    Estimate(EstimateArgs),
    /// Tabulate BIC over a penalty grid.
    Grid(GridArgs),
    /// Repeat simulation, selection and scoring over many seeds.
    Benchmark(BenchmarkArgs),
    /// Check the optimality conditions of a stored solution.
    Kkt(KktArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: ScenarioKind,
    #[arg(long, default_value_t = 30)]
    p: usize,
    /// Comma-separated block lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [80, 130, 90])]
    blocks: Vec<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: u64,
    /// Dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    /// Smoothing accuracy; defaults to 1e-2 times the objective at zero.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 50_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    rel_tol: f64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    l0: f64,
    /// Disable adaptive momentum restart.
    #[arg(long)]
    no_restart: bool,
    /// Start from zero instead of the pooled lasso.
    #[arg(long)]
    zero_init: bool,
    /// Change-point threshold on successive differences.
    #[arg(long)]
    fuse_tol: Option<f64>,
    /// Threshold below which block coefficients count as zero.
    #[arg(long)]
    zero_tol: Option<f64>,
}

impl SolverArgs {
    fn config(&self, lambda1: f64, lambda2: f64) -> SolverConfig {
        SolverConfig {
            epsilon: self.epsilon,
            gamma: self.gamma,
            l0: self.l0,
            max_iter: self.max_iter,
            rel_tol: self.rel_tol,
            patience: self.patience,
            restart: !self.no_restart,
            init: if self.zero_init { Init::Zero } else { Init::Pooled },
            ..SolverConfig::new(lambda1, lambda2)
        }
    }

    fn thresholds(&self) -> Thresholds {
        Thresholds {
            fuse_tol: self.fuse_tol,
            zero_tol: self.zero_tol,
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Dataset CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, requires = "lambda2", conflicts_with = "grid")]
    lambda1: Option<f64>,
    #[arg(long, requires = "lambda1")]
    lambda2: Option<f64>,
    /// Grid preset (default10 or full) for BIC selection.
    #[arg(long, required_unless_present = "lambda1")]
    grid: Option<String>,
    /// Result JSON.
    #[arg(long)]
    out: PathBuf,
    /// BIC table CSV when selecting over a grid; defaults to the output path with extension `bic.csv`.
    #[arg(long)]
    bic_csv: Option<PathBuf>,
    /// Center and scale every column first.
    #[arg(long)]
    standardize: bool,
    /// Store the raw coefficient paths.
    #[arg(long)]
    paths: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "default10")]
    grid: String,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Total BIC CSV; defaults to the output path with extension `bic.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    standardize: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value = "default10")]
    grid: String,
    /// Run `r` uses seed `seed + r`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON; metric grids go next to it as `<stem>.<metric>.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct KktArgs {
    #[arg(long)]
    input: PathBuf,
    /// Result JSON of `estimate`.
    #[arg(long)]
    solution: PathBuf,
    /// Defaults to the value recorded in the solution.
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

fn parse_kind(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Io(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Io(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn load(path: &Path, standardize: bool) -> Result<TimeSeriesDataset, Failure> {
    let data = load_dataset(path)?;
    Ok(if standardize { data.standardize()? } else { data })
}

fn simulate(args: SimulateArgs) -> CmdResult {
    let spec = ScenarioSpec {
        kind: args.scenario.kind,
        p: args.scenario.p,
        block_sizes: args.scenario.blocks,
        seed: args.seed,
    };
    let (data, truth) = sample_scenario(&spec)?;
    write_file(&args.out, &data.to_csv_string())?;
    if let Some(path) = &args.truth {
        write_json(path, &TruthDocument::new(&spec, &truth))?;
    }
    println!("n = {}, p = {}, blocks = {:?}", data.n(), data.p(), truth.partition.block_sizes());
    Ok(())
}

fn estimate(args: EstimateArgs) -> CmdResult {
    let data = load(&args.input, args.standardize)?;
    let thresholds = args.solver.thresholds();
    let (estimate, config, selected) = match (args.lambda1, args.lambda2, &args.grid) {
        (Some(l1), Some(l2), _) => {
            let cfg = args.solver.config(l1, l2);
            let estimate = estimate_graph(&data, &cfg, &thresholds)?;
            (estimate, cfg, None)
        }
        (_, _, Some(name)) => {
            let grid = PenaltyGrid::preset(name)?;
            let cfg = args.solver.config(grid.lambda1[0], grid.lambda2[0]);
            let options = GridOptions {
                thresholds,
                ..GridOptions::default()
            };
            let search = grid_search(&data, &grid, &cfg, &options)?;
            let csv = args.bic_csv.clone().unwrap_or_else(|| sibling(&args.out, "bic.csv"));
            write_file(&csv, &search.report.total_csv())?;
            let selected = search
                .report
                .selected
                .clone()
                .ok_or_else(|| Failure::Io("no grid cell could be scored".into()))?;
            let estimate = search.estimate.ok_or_else(|| Failure::Io("no estimate at the selected cell".into()))?;
            (estimate, cfg.with_lambdas(selected.lambda1, selected.lambda2), Some(selected))
        }
        _ => return Err(Failure::Usage("give --lambda1 and --lambda2, or --grid".into())),
    };
    let doc = EstimateDocument::new(
        EstimateConfig {
            input: args.input.display().to_string(),
            standardize: args.standardize,
            solver: config,
            thresholds,
            grid: args.grid.as_deref().map(PenaltyGrid::preset).transpose()?,
        },
        &estimate,
        selected,
        args.paths,
    );
    write_json(&args.out, &doc)?;
    if let Some(s) = &doc.selected {
        println!("selected lambda1 = {}, lambda2 = {} (BIC {})", s.lambda1, s.lambda2, s.total_bic);
    }
    for node in &doc.nodes {
        println!(
            "node {:>3}: {} block(s), boundaries {:?}",
            node.node,
            node.blocks.len(),
            &node.boundaries[1..node.boundaries.len() - 1]
        );
    }
    let counts = estimate.graph.edge_counts();
    println!(
        "edges per index: min {}, max {}",
        counts.iter().min().unwrap_or(&0),
        counts.iter().max().unwrap_or(&0)
    );
    for w in &doc.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn grid(args: GridArgs) -> CmdResult {
    let data = load(&args.input, args.standardize)?;
    let grid = PenaltyGrid::preset(&args.grid)?;
    let cfg = args.solver.config(grid.lambda1[0], grid.lambda2[0]);
    let options = GridOptions {
        thresholds: args.solver.thresholds(),
        ..GridOptions::default()
    };
    let search = grid_search(&data, &grid, &cfg, &options)?;
    let csv = args.csv.clone().unwrap_or_else(|| sibling(&args.out, "bic.csv"));
    write_file(&csv, &search.report.total_csv())?;
    if let Some(s) = &search.report.selected {
        println!("selected lambda1 = {}, lambda2 = {} (BIC {})", s.lambda1, s.lambda2, s.total_bic);
    }
    let config = EstimateConfig {
        input: args.input.display().to_string(),
        standardize: args.standardize,
        solver: cfg,
        thresholds: options.thresholds,
        grid: Some(grid),
    };
    write_json(&args.out, &GridDocument::new(config, search.report))
}

fn benchmark(args: BenchmarkArgs) -> CmdResult {
    let mut cfg = BenchmarkConfig::standard(args.scenario.kind, args.runs, args.seed);
    cfg.p = args.scenario.p;
    cfg.block_sizes = args.scenario.blocks;
    cfg.grid = PenaltyGrid::preset(&args.grid)?;
    cfg.solver = args.solver.config(cfg.grid.lambda1[0], cfg.grid.lambda2[0]);
    cfg.options.thresholds = args.solver.thresholds();
    let report = run_benchmark(&cfg)?;
    let metrics = &report.grid_metrics;
    for (name, values) in [("precision", &metrics.precision), ("recall", &metrics.recall), ("f1", &metrics.f1)] {
        write_file(&sibling(&args.out, &format!("{name}.csv")), &matrix_csv(&cfg.grid, values))?;
    }
    for (label, summary) in [("TD-Lasso", &report.tdlasso), ("oracle", &report.oracle)] {
        match summary {
            Some(s) => println!(
                "{label:<8} precision {:.3} ({:.3})  recall {:.3} ({:.3})  F1 {:.3} ({:.3})",
                s.precision.mean, s.precision.std, s.recall.mean, s.recall.std, s.f1.mean, s.f1.std
            ),
            None => println!("{label:<8} no successful runs"),
        }
    }
    if report.failures > 0 {
        eprintln!("warning: {} of {} runs failed", report.failures, report.runs);
    }
    write_json(&args.out, &BenchmarkDocument::new(cfg, report))
}

fn kkt(args: KktArgs) -> CmdResult {
    let data = load_dataset(&args.input)?;
    let doc: EstimateDocument = read_json(&args.solution)?;
    if doc.n != data.n() || doc.p != data.p() || doc.nodes.len() != data.p() {
        return Err(Failure::Io(format!(
            "solution is {}x{} with {} nodes, dataset is {}x{}",
            doc.n,
            doc.p,
            doc.nodes.len(),
            data.n(),
            data.p()
        )));
    }
    let data = if doc.config.standardize { data.standardize()? } else { data };
    let lambda1 = args.lambda1.unwrap_or(doc.config.solver.lambda1);
    let lambda2 = args.lambda2.unwrap_or(doc.config.solver.lambda2);
    let mut worst: f64 = 0.0;
    for node in &doc.nodes {
        let beta = node.coefficient_matrix(doc.p, doc.n)?;
        let r = kkt_residual(&data, node.node, beta.view(), lambda1, lambda2, node.fuse_tol, node.zero_tol)?;
        println!("node {:>3}: {r:.6e}", node.node);
        worst = worst.max(r);
    }
    println!("max residual {worst:.6e} (tol {:e})", args.tol);
    if worst <= args.tol {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Grid(a) => grid(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Kkt(a) => kkt(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Verification) => {
            eprintln!("error: optimality conditions violated");
            ExitCode::from(3)
        }
    }
}
