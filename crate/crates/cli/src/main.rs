use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use l1flow::check::{self, CheckSizes};
use l1flow::io::{self, RunConfig, SolveSummary};
use l1flow::problem::{Problem, RASTRIGIN_STARTS};
use l1flow::solver::{self, MultiStartReport, SolveError};

const DEFAULT_SEED: u64 = 7;
const SUCCESS_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "l1flow",
    version,
    about = "Nonlinear L1 minimization by augmented smoothing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem from one starting point.
    Solve(SolveArgs),
    /// Run a benchmark campaign on a built-in problem.
    Bench(BenchArgs),
    /// Run the randomized self-test suites.
    Check {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Solve over a theta × mu0 grid.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "builtin")]
    config: Option<PathBuf>,
    /// Built-in problem name.
    #[arg(long)]
    builtin: Option<String>,
    /// Starting point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Final integration time.
    #[arg(long, allow_hyphen_values = true)]
    tf: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu0: Option<f64>,
    /// Diagonal of M: n entries for x, then one for mu.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mdiag: Option<Vec<f64>>,
    /// Output file for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: ProblemArgs,
    /// Trajectory CSV output.
    #[arg(long)]
    traj: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// `problem1` or `rastrigin`.
    name: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    tf: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu0: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mdiag: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ProblemArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    thetas: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mu0s: Vec<f64>,
}

/// Failures and the exit code each maps to.
enum Failure {
    Config(anyhow::Error),
    Domain(anyhow::Error),
    Check,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Check => 1,
            Failure::Domain(_) => 2,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Check { seed } => cmd_check(seed),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("error: {e:#}"),
                Failure::Domain(e) => eprintln!("domain error: {e:#}"),
                Failure::Check => eprintln!("self-check failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_run_config(args: &ProblemArgs) -> anyhow::Result<RunConfig> {
    let mut rc = match (&args.config, &args.builtin) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::builtin(name),
        (None, None) => bail!("one of --config or --builtin is required"),
    };
    if args.x0.is_some() {
        rc.x0 = args.x0.clone();
    }
    if args.seed.is_some() {
        rc.seed = args.seed;
    }
    if args.tf.is_some() {
        rc.t_final = args.tf;
    }
    if args.theta.is_some() {
        rc.theta = args.theta;
    }
    if args.mu0.is_some() {
        rc.mu0 = args.mu0;
    }
    if args.mdiag.is_some() {
        rc.m_diag = args.mdiag.clone();
    }
    if args.out.is_some() {
        rc.out = args.out.clone();
    }
    Ok(rc)
}

fn starting_point(rc: &RunConfig, problem: &Problem) -> anyhow::Result<Vec<f64>> {
    if let Some(x0) = &rc.x0 {
        return Ok(x0.clone());
    }
    let seed = rc.seed.unwrap_or(DEFAULT_SEED);
    let mut starts = solver::sample_starts(problem, 1, seed)
        .context("no --x0 given and the problem has no sample box")?;
    Ok(starts.remove(0))
}

fn check_writable(path: &Path) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        bail!("output directory {} does not exist", dir.display());
    }
    if path.is_dir() {
        bail!("output path {} is a directory", path.display());
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_solve(args: SolveArgs) -> Result<(), Failure> {
    let mut rc = load_run_config(&args.common)?;
    if args.traj.is_some() {
        rc.traj = args.traj.clone();
    }
    let problem = rc.build_problem().map_err(anyhow::Error::from)?;
    let config = rc.solve_config(problem.n_vars());
    config
        .validate(problem.n_vars())
        .map_err(anyhow::Error::from)?;
    let x0 = starting_point(&rc, &problem)?;
    rc.x0 = Some(x0.clone());
    for path in rc.out.iter().chain(rc.traj.iter()) {
        check_writable(path)?;
    }

    let mut result = match solver::solve(&problem, &x0, &config) {
        Ok(r) => r,
        Err(e @ (SolveError::Domain { .. } | SolveError::NonFiniteStart)) => {
            return Err(Failure::Domain(e.into()))
        }
        Err(e) => return Err(Failure::Config(e.into())),
    };
    let traj = result.trajectory.take();
    if let (Some(path), Some(traj)) = (&rc.traj, &traj) {
        let file =
            File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut w = BufWriter::new(file);
        io::write_trajectory_csv(&mut w, traj)
            .and_then(|()| w.flush())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    let summary = SolveSummary {
        config: rc.effective(problem.n_vars()),
        result,
    };
    let text = io::to_json(&summary).context("serializing summary")?;
    match &rc.out {
        Some(path) => {
            write_file(path, &text)?;
            let r = &summary.result;
            println!(
                "f = {}  x* = {:?}  mu* = {}  stationary = {}  ({})",
                io::format_f64(r.f_value),
                r.x_star,
                io::format_f64(r.mu_star),
                r.stationary,
                r.stop_reason.as_str()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn thread_pool() -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("L1FLOW_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("L1FLOW_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("L1FLOW_THREADS must be positive");
        }
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}

/// Report JSON without timing fields, so identical inputs give identical bytes.
fn strip_wall_time(mut v: Value) -> Value {
    match &mut v {
        Value::Object(map) => {
            map.remove("wall_time");
            for (_, child) in map.iter_mut() {
                *child = strip_wall_time(child.take());
            }
        }
        Value::Array(items) => {
            for child in items.iter_mut() {
                *child = strip_wall_time(child.take());
            }
        }
        _ => {}
    }
    v
}

fn print_table(report: &MultiStartReport, problem: &Problem) {
    println!(
        "{:>4}  {:>24}  {:>12}  {:>26}  {:>10}  {:>8}",
        "run", "start", "f_value", "x_star", "dist", "time_s"
    );
    for (i, run) in report.runs.iter().enumerate() {
        let start = format!("({:.4}, {:.4})", run.start[0], run.start[1]);
        match &run.result {
            Some(r) => {
                let dist = solver::distance_to_nearest(&r.x_star, problem.known_minima());
                println!(
                    "{:>4}  {:>24}  {:>12.4e}  {:>26}  {:>10.2e}  {:>8.4}",
                    i + 1,
                    start,
                    r.f_value,
                    format!("({:.4e}, {:.4e})", r.x_star[0], r.x_star[1]),
                    dist,
                    r.wall_time
                );
            }
            None => println!(
                "{:>4}  {:>24}  failed: {}",
                i + 1,
                start,
                run.error.as_deref().unwrap_or("unknown")
            ),
        }
    }
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let seed = args.seed.unwrap_or(DEFAULT_SEED);
    let rc = RunConfig {
        problem: Some(args.name.clone()),
        t_final: args.tf,
        theta: args.theta,
        mu0: args.mu0,
        m_diag: args.mdiag.clone(),
        seed: Some(seed),
        ..RunConfig::default()
    };
    let problem = rc.build_problem().map_err(anyhow::Error::from)?;
    let config = rc.solve_config(problem.n_vars());
    config
        .validate(problem.n_vars())
        .map_err(anyhow::Error::from)?;
    if let Some(path) = &args.out {
        check_writable(path)?;
    }
    let starts: Vec<Vec<f64>> = match problem.name() {
        Some("problem1") => {
            let mut s = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
            s.extend(solver::sample_starts(&problem, 50, seed).map_err(anyhow::Error::from)?);
            s
        }
        Some("rastrigin_l1") => RASTRIGIN_STARTS.iter().map(|p| p.to_vec()).collect(),
        _ => return Err(anyhow!("no benchmark defined for `{}`", args.name).into()),
    };

    let pool = thread_pool()?;
    let started = Instant::now();
    let report =
        pool.install(|| solver::solve_many(&problem, &config, starts, SUCCESS_TOL, Some(seed)));
    let elapsed = started.elapsed().as_secs_f64();

    print_table(&report, &problem);
    let near = report
        .runs
        .iter()
        .filter(|r| {
            r.result.as_ref().is_some_and(|res| {
                solver::distance_to_nearest(&res.x_star, problem.known_minima()) <= 1e-3
            })
        })
        .count();
    let n = report.runs.len();
    println!(
        "success {}/{} at f <= {:e}; {}/{} within 1e-3 of a known minimum; {:.2}s",
        report.success_count, n, SUCCESS_TOL, near, n, elapsed
    );

    if let Some(path) = &args.out {
        let artifact = json!({
            "benchmark": problem.name(),
            "config": rc.effective(problem.n_vars()),
            "report": report,
        });
        let text = io::to_json(&strip_wall_time(artifact)).context("serializing report")?;
        write_file(path, &text)?;
    }
    Ok(())
}

fn cmd_check(seed: u64) -> Result<(), Failure> {
    let reports = check::run_all(seed, CheckSizes::default());
    let mut all_pass = true;
    for r in &reports {
        println!(
            "{:<4}  {:<18}  cases {:>7}  failures {:>5}  worst {:.2e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.failures,
            r.worst
        );
        all_pass &= r.passed();
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    if args.thetas.is_empty() || args.mu0s.is_empty() {
        return Err(anyhow!("--thetas and --mu0s must each list at least one value").into());
    }
    let rc = load_run_config(&args.common)?;
    let problem = rc.build_problem().map_err(anyhow::Error::from)?;
    let x0 = starting_point(&rc, &problem)?;
    if let Some(path) = &rc.out {
        check_writable(path)?;
    }

    println!(
        "{:>10}  {:>10}  {:>12}  {:>12}  {:>10}  {:>14}",
        "theta", "mu0", "f_value", "mu_star", "stationary", "stop"
    );
    let mut rows = Vec::new();
    for &theta in &args.thetas {
        for &mu0 in &args.mu0s {
            let mut config = rc.solve_config(problem.n_vars());
            config.theta = theta;
            config.mu0 = mu0;
            config
                .validate(problem.n_vars())
                .map_err(anyhow::Error::from)?;
            let row = match solver::solve(&problem, &x0, &config) {
                Ok(r) => {
                    println!(
                        "{:>10.4e}  {:>10.4e}  {:>12.4e}  {:>12.4e}  {:>10}  {:>14}",
                        theta,
                        mu0,
                        r.f_value,
                        r.mu_star,
                        r.stationary,
                        r.stop_reason.as_str()
                    );
                    json!({
                        "theta": theta,
                        "mu0": mu0,
                        "f_value": r.f_value,
                        "x_star": r.x_star,
                        "mu_star": r.mu_star,
                        "kkt_residual": r.kkt_residual,
                        "stationary": r.stationary,
                        "stop_reason": r.stop_reason,
                    })
                }
                Err(e) => {
                    let msg = solver::error_chain(&e);
                    println!("{theta:>10.4e}  {mu0:>10.4e}  failed: {msg}");
                    json!({ "theta": theta, "mu0": mu0, "error": msg })
                }
            };
            rows.push(row);
        }
    }
    if let Some(path) = &rc.out {
        let text = io::to_json(&json!({ "x0": x0, "rows": rows })).context("serializing sweep")?;
        write_file(path, &text)?;
    }
    Ok(())
}
