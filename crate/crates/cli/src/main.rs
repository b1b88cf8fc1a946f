use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sqrtmc::certificate::certify;
use sqrtmc::convex::ConvexOptions;
use sqrtmc::experiments::{compare, run_sweep, SweepSpec, PRESETS};
use sqrtmc::instance_gen::{InstanceDescriptor, NoiseKind, ProblemInstance};
use sqrtmc::solver::{solve, InitMode, SolveSummary, SolverConfig};
use sqrtmc::Error;

/// Tuning-free square-root matrix completion.
#[derive(Debug, Parser)]
#[command(name = "sqrtmc", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write an instance descriptor (parameters and seed, never raw matrices).
    Gen(GenArgs),
    /// Run factored gradient descent on an instance and write the solve report.
    Solve(SolveArgs),
    /// Re-solve from a report's configuration and write the optimality certificate.
    Certify(CertifyArgs),
    /// Compare square-root MC with nuclear-norm least squares tuned by a given noise level.
    Compare(CompareArgs),
    /// Run a parameter sweep and write the results CSV and slope summary.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Uniform,
    Rademacher,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Gaussian => NoiseKind::Gaussian,
            NoiseArg::Uniform => NoiseKind::Uniform,
            NoiseArg::Rademacher => NoiseKind::Rademacher,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Spectral,
    Oracle,
}

#[derive(Debug, clap::Args)]
struct GenArgs {
    /// Matrix dimension (n x n).
    #[arg(long)]
    n: usize,
    /// Rank of the groundtruth.
    #[arg(long)]
    r: usize,
    /// Observation probability.
    #[arg(long)]
    p: f64,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SolverArgs {
    /// C in lambda = C / sqrt(n).
    #[arg(long, default_value_t = 4.0)]
    lambda_coeff: f64,
    /// Initialization; `oracle` starts at the groundtruth factors.
    #[arg(long, value_enum, default_value = "spectral")]
    init: InitArg,
    /// Iteration cap [default: 50 n].
    #[arg(long)]
    max_iters: Option<usize>,
    /// Stop when the gradient norm falls below grad_tol * lambda * sqrt(sigma1_hat).
    #[arg(long, default_value = "1e-10")]
    grad_tol: f64,
    /// Backtracking on the surrogate objective.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    line_search: bool,
    /// c in eta_tilde = c / (p_hat * sigma1_hat).
    #[arg(long, default_value_t = 0.25)]
    step_coeff: f64,
    /// Log every k-th iteration.
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            lambda_coeff: self.lambda_coeff,
            step_coeff: self.step_coeff,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            init_mode: match self.init {
                InitArg::Spectral => InitMode::Spectral,
                InitArg::Oracle => InitMode::Oracle,
            },
            line_search: self.line_search,
            trace_every: self.trace_every,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, clap::Args)]
struct SolveArgs {
    /// Instance descriptor JSON written by `gen`.
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct CertifyArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Solve report JSON written by `solve`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct CompareArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Noise level used to tune the vanilla estimator: lambda_v = 2 sigma sqrt(n p_hat).
    #[arg(long)]
    sigma_known: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Relative-change tolerance of the vanilla solver.
    #[arg(long, default_value = "1e-8")]
    vanilla_tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SweepArgs {
    /// Sweep specification JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Named preset: fig1a, fig1b, fig1c, fig2-proximity, or a `-paper` variant.
    #[arg(long)]
    preset: Option<String>,
    /// Concurrent rows [default: available cores].
    #[arg(long, env = "SQRTMC_WORKERS")]
    workers: Option<usize>,
    /// Results CSV.
    #[arg(long)]
    out: PathBuf,
    /// Slope summary JSON [default: <out>.slope.json].
    #[arg(long)]
    slope_out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            let mut f = File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
            writeln!(f, "{text}")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn load_instance(path: &Path) -> Result<ProblemInstance> {
    let desc: InstanceDescriptor = read_json(path)?;
    desc.generate()
        .with_context(|| format!("cannot generate instance from {}", path.display()))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut desc = InstanceDescriptor::new(args.n, args.r, args.p, args.sigma, args.seed);
    desc.noise = args.noise.into();
    desc.validate()?;
    write_json(args.out.as_deref(), &desc)
}

fn cmd_solve(args: &SolveArgs) -> Result<ExitCode> {
    let inst = load_instance(&args.instance)?;
    let cfg = args.solver.config();
    match solve(&inst.obs, inst.r(), &cfg, Some(inst.ground_truth())) {
        Ok(report) => {
            log::info!(
                "stop={:?} t*={} grad_norm={:.3e}",
                report.stop_reason,
                report.t_star(),
                report.best_grad_norm
            );
            write_json(args.out.as_deref(), &report.summary())?;
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::Diverged { iteration, partial }) => {
            eprintln!("error: iterate diverged at iteration {iteration}");
            write_json(args.out.as_deref(), &partial.summary())?;
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_certify(args: &CertifyArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let summary: SolveSummary = read_json(&args.report)?;
    if summary.n != inst.n() || summary.rank != inst.r() {
        bail!(
            "report is for n={}, r={} but the instance has n={}, r={}",
            summary.n,
            summary.rank,
            inst.n(),
            inst.r()
        );
    }
    // Reports omit the factors; the solve is deterministic, so rerun it.
    let report = solve(&inst.obs, inst.r(), &summary.config, Some(inst.ground_truth()))?;
    if report.t_star() != summary.t_star || report.best_grad_norm != summary.grad_norm {
        bail!(
            "re-solve does not reproduce the report (t* {} vs {}); was it produced by a different build?",
            report.t_star(),
            summary.t_star
        );
    }
    let cert = certify(&report.best, &inst.obs, report.lambda, Some(&inst))?;
    write_json(args.out.as_deref(), &cert)
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let opts = ConvexOptions {
        tol: args.vanilla_tol,
        ..ConvexOptions::default()
    };
    let rep = compare(&inst, args.sigma_known, &args.solver.config(), &opts)?;
    write_json(args.out.as_deref(), &rep)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let spec = match (&args.spec, &args.preset) {
        (Some(path), _) => read_json::<SweepSpec>(path)?,
        (None, Some(name)) => SweepSpec::preset(name)
            .with_context(|| format!("available presets: {}", PRESETS.join(", ")))?,
        (None, None) => bail!("one of --spec or --preset is required"),
    };
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_sweep(&spec, workers)?;
    let file = File::create(&args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    result.write_csv(BufWriter::new(file))?;
    let slope_path = args.slope_out.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".slope.json");
        PathBuf::from(p)
    });
    match result.slope() {
        Ok(slope) => write_json(Some(&slope_path), &slope)?,
        Err(e) => log::warn!("no slope summary written: {e}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| ExitCode::SUCCESS),
        Command::Solve(a) => cmd_solve(a),
        Command::Certify(a) => cmd_certify(a).map(|_| ExitCode::SUCCESS),
        Command::Compare(a) => cmd_compare(a).map(|_| ExitCode::SUCCESS),
        Command::Sweep(a) => cmd_sweep(a).map(|_| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
