//! Batch front-end for the robust filter toolkit: run design, verify,
//! simulate, and sweep pipelines against built-in cases or user model
//! and spec files, emitting JSON/CSV artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustkf::cases::{benchmark_case, CASE_NAMES};
use robustkf::design::{design_robust_filter, DesignSolution, DesignSpec, Target};
use robustkf::model::{Domain, LtiModel};
use robustkf::sim::{simulate_filter, SimConfig};
use robustkf::sparse::sparse_design;
use robustkf::verify::{verify_solution, VerificationReport};
use robustkf::Error;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_USAGE: u8 = 4;
const EXIT_DIVERGENCE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "robustkf",
    version,
    about = "Joint Kalman gain and worst-case noise covariance design"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a filter design and verify it against the steady-state oracle.
    Design(DesignArgs),
    /// Re-verify a previously saved solution.
    Verify(VerifyArgs),
    /// Monte-Carlo simulate a designed filter.
    Simulate(SimulateArgs),
    /// Run a grid of designs over cases, trace budgets, and gammas.
    Sweep(SweepArgs),
    /// List the built-in benchmark cases.
    ListCases,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Built-in case name (see list-cases).
    #[arg(long, conflicts_with = "model")]
    case: Option<String>,
    /// Model file (JSON or TOML).
    #[arg(long, requires = "spec")]
    model: Option<PathBuf>,
    /// Design spec file (JSON); optional override for built-in cases.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Trace budget override.
    #[arg(long)]
    theta: Option<f64>,
    /// Sensor-term weight override.
    #[arg(long)]
    gamma: Option<f64>,
    /// Norm selector override (1 or 2).
    #[arg(long)]
    lambda: Option<f64>,
    /// Process-channel weights, comma-separated.
    #[arg(long, value_delimiter = ',')]
    wq: Option<Vec<f64>>,
    /// Sensor weights, comma-separated.
    #[arg(long, value_delimiter = ',')]
    wr: Option<Vec<f64>>,
    /// Precision bounds file (JSON).
    #[arg(long)]
    bounds: Option<PathBuf>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory for artifacts.
    #[arg(long, env = "ROBUSTKF_OUT", default_value = ".")]
    out: PathBuf,
    /// Which artifact formats to write.
    #[arg(long, default_value = "all", value_parser = ["all", "json", "csv"])]
    format: String,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Previously emitted solution.json.
    #[arg(long)]
    solution: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Reuse a saved solution instead of re-solving.
    #[arg(long)]
    solution: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Horizon in seconds (continuous) or steps (discrete).
    #[arg(long)]
    horizon: Option<f64>,
    /// Integration step for continuous models.
    #[arg(long)]
    dt: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Cases to sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    cases: Vec<String>,
    /// Trace budgets to sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    /// Gammas to sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    /// Worker thread limit for grid points.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Design(args) => run_design(args),
        Command::Verify(args) => run_verify(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Sweep(args) => run_sweep(args),
        Command::ListCases => {
            for name in CASE_NAMES {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": e.to_string(),
                    "kind": error_kind(&e),
                    "exit_code": code,
                })
            );
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::NumericalFailure(_)
        | Error::IterationLimit { .. }
        | Error::Unstable(_)
        | Error::NotPsd { .. }
        | Error::SingularDiscretization { .. }
        | Error::PruningRejected { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Infeasible { .. } => "infeasible",
        Error::Divergence { .. } => "divergence",
        Error::NumericalFailure(_) | Error::IterationLimit { .. } => "numerical",
        Error::Unstable(_) => "unstable",
        Error::PruningRejected { .. } => "pruning_rejected",
        Error::Io(_) => "io",
        Error::Parse(_) => "parse",
        Error::UnknownCase(..) => "unknown_case",
        _ => "usage",
    }
}

/// Resolves the (model, spec) pair with precedence
/// case defaults < spec file < individual flags.
fn resolve_input(input: &InputArgs) -> Result<(String, LtiModel, DesignSpec), Error> {
    let (name, model, mut spec) = match (&input.case, &input.model) {
        (Some(case), None) => {
            let c = benchmark_case(case)?;
            let spec = match &input.spec {
                Some(path) => DesignSpec::from_path(path)?,
                None => c.spec,
            };
            (c.name, c.model, spec)
        }
        (None, Some(path)) => {
            let model = LtiModel::from_path(path)?;
            let spec_path = input.spec.as_ref().expect("clap enforces --spec");
            let spec = DesignSpec::from_path(spec_path)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            (name, model, spec)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --case or --model must be supplied".into(),
            ))
        }
    };
    if let Some(theta) = input.theta {
        spec.target = Target::TraceBound(theta);
    }
    if let Some(gamma) = input.gamma {
        spec.gamma = gamma;
    }
    if let Some(lambda) = input.lambda {
        spec.lambda = lambda;
    }
    if let Some(wq) = &input.wq {
        spec.wq = Some(wq.clone());
    }
    if let Some(wr) = &input.wr {
        spec.wr = Some(wr.clone());
    }
    if let Some(path) = &input.bounds {
        let text = fs::read_to_string(path)?;
        spec.bounds = Some(serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok((name, model, spec))
}

fn solve(model: &LtiModel, spec: &DesignSpec) -> Result<DesignSolution, Error> {
    if spec.lambda == 1.0 {
        sparse_design(model, spec)
    } else {
        design_robust_filter(model, spec)
    }
}

fn write_artifact(out: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), contents)?;
    Ok(())
}

fn summary_row(name: &str, sol: &DesignSolution, report: &VerificationReport) -> String {
    format!(
        "{},{:?},{},{},{},{}\n",
        name,
        sol.solver_status,
        sol.objective,
        sol.sigma_inf.trace(),
        report.trace_margin,
        sol.active_sensors().len()
    )
}

const SUMMARY_HEADER: &str = "case,status,objective,trace,trace_margin,active_sensors\n";

fn run_design(args: DesignArgs) -> Result<(), Error> {
    let (name, model, spec) = resolve_input(&args.input)?;
    let sol = solve(&model, &spec)?;
    let report = verify_solution(&model, &sol, &spec)?;
    let out = &args.output.out;
    if args.output.format != "csv" {
        write_artifact(out, "solution.json", &sol.to_json())?;
        write_artifact(
            out,
            "verification.json",
            &serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
    }
    if args.output.format != "json" {
        let mut csv = String::from(SUMMARY_HEADER);
        csv.push_str(&summary_row(&name, &sol, &report));
        write_artifact(out, "summary.csv", &csv)?;
    }
    println!(
        "{name}: status {:?}, objective {:.6}, trace {:.6}, margin {:.3e}, {} active sensors, verification {}",
        sol.solver_status,
        sol.objective,
        sol.sigma_inf.trace(),
        report.trace_margin,
        sol.active_sensors().len(),
        if report.passed { "passed" } else { "FAILED" }
    );
    if !report.passed {
        return Err(Error::NumericalFailure(
            "independent verification failed".into(),
        ));
    }
    Ok(())
}

fn run_verify(args: VerifyArgs) -> Result<(), Error> {
    let (name, model, spec) = resolve_input(&args.input)?;
    let text = fs::read_to_string(&args.solution)?;
    let sol = DesignSolution::from_json(&text)?;
    let report = verify_solution(&model, &sol, &spec)?;
    write_artifact(
        &args.output.out,
        "verification.json",
        &serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    println!(
        "{name}: verification {} (trace margin {:.3e}, stable: {})",
        if report.passed { "passed" } else { "FAILED" },
        report.trace_margin,
        report.stable
    );
    if !report.passed {
        return Err(Error::NumericalFailure(
            "independent verification failed".into(),
        ));
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<(), Error> {
    let (name, model, spec) = resolve_input(&args.input)?;
    let sol = match &args.solution {
        Some(path) => DesignSolution::from_json(&fs::read_to_string(path)?)?,
        None => solve(&model, &spec)?,
    };
    // simulate the active-sensor subsystem; inactive sensors carry
    // unbounded noise and contribute nothing through their zero columns
    let q = sol.q_matrix()?;
    let (_, c_a, k_a, r_a) = sol.active_measurement(&model);
    let sim_model = match model.domain {
        Domain::Discrete => LtiModel::new_discrete(
            model.a.clone(),
            model.b.clone(),
            c_a,
            model.sample_time.unwrap_or(1.0),
        )?,
        Domain::Continuous => {
            LtiModel::new(Domain::Continuous, model.a.clone(), model.b.clone(), c_a)?
        }
    };
    let mut config = SimConfig {
        n_runs: args.runs,
        seed: args.seed,
        ..Default::default()
    };
    if let Some(h) = args.horizon {
        config.horizon = h;
    } else if model.domain == Domain::Discrete {
        config.horizon = 20_000.0;
    }
    if let Some(dt) = args.dt {
        config.dt = dt;
    }
    let result = simulate_filter(&sim_model, &k_a, &q, &r_a, &config)?;
    write_artifact(&args.output.out, "sim.csv", &result.to_csv())?;
    let last_mean: f64 = result
        .mean_error
        .last()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .unwrap_or(0.0);
    println!(
        "{name}: {} runs over {} steps, final mean-error norm {:.3e}",
        args.runs,
        result.time_grid.len() - 1,
        last_mean
    );
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), Error> {
    if args.cases.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep requires --cases with at least one case".into(),
        ));
    }
    let thetas: Vec<Option<f64>> = if args.theta.is_empty() {
        vec![None]
    } else {
        args.theta.iter().copied().map(Some).collect()
    };
    let gammas: Vec<Option<f64>> = if args.gamma.is_empty() {
        vec![None]
    } else {
        args.gamma.iter().copied().map(Some).collect()
    };

    let mut grid = vec![];
    for case in &args.cases {
        for &theta in &thetas {
            for &gamma in &gammas {
                grid.push((case.clone(), theta, gamma));
            }
        }
    }

    let pool = rayon_pool(args.jobs)?;
    let rows: Vec<String> = pool.install(|| {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|(case, theta, gamma)| sweep_point(case, *theta, *gamma))
            .collect()
    });

    let mut csv = String::from(
        "case,theta,gamma,lambda,status,objective,trace,trace_margin,active_sensors,q_diag,r_diag,error\n",
    );
    for row in &rows {
        csv.push_str(row);
    }
    write_artifact(&args.output.out, "sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn rayon_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Error> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::NumericalFailure(format!("thread pool: {e}")))
}

fn sweep_point(case: &str, theta: Option<f64>, gamma: Option<f64>) -> String {
    let run = || -> Result<String, Error> {
        let c = benchmark_case(case)?;
        let mut spec = c.spec;
        if let Some(t) = theta {
            spec.target = Target::TraceBound(t);
        }
        if let Some(g) = gamma {
            spec.gamma = g;
        }
        let sol = solve(&c.model, &spec)?;
        let report = verify_solution(&c.model, &sol, &spec)?;
        Ok(format!(
            "{},{},{},{},{:?},{},{},{},{},{},{},\n",
            case,
            theta.map_or(String::new(), |t| t.to_string()),
            gamma.map_or(String::new(), |g| g.to_string()),
            spec.lambda,
            sol.solver_status,
            sol.objective,
            sol.sigma_inf.trace(),
            report.trace_margin,
            sol.active_sensors().len(),
            join_opt(&sol.q_diag),
            join_opt(&sol.r_diag),
        ))
    };
    run().unwrap_or_else(|e| {
        format!(
            "{},{},{},,,,,,,,,\"{}\"\n",
            case,
            theta.map_or(String::new(), |t| t.to_string()),
            gamma.map_or(String::new(), |g| g.to_string()),
            e.to_string().replace('"', "'")
        )
    })
}

fn join_opt(v: &[Option<f64>]) -> String {
    v.iter()
        .map(|x| x.map_or("inf".to_string(), |v| v.to_string()))
        .collect::<Vec<_>>()
        .join(";")
}
